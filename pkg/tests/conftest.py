import numpy as np
import pytest

from oracles import max_rel_err, numeric_grad


def rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return max_rel_err(a, n) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
