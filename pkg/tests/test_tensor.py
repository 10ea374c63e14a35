import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import numeric_grad, rel_err
from ibpd.tensor import (
    DimensionError,
    DomainError,
    NondeterminismError,
    NonFiniteError,
    Parameter,
    Tensor,
    activation,
    backward,
    clip,
    concat,
    cumsum,
    elementwise,
    gradient_check,
    logsumexp,
    matmul,
    no_grad,
    record,
    reduce,
)


def check_grad(build, *arrays, tol=1e-6):
    """Compare backward() against test-local central differences for every input."""
    params = [Parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    loss = build(*params)
    backward(loss)
    for p in params:
        num = numeric_grad(lambda: build(*params).item(), p.data)
        assert rel_err(p.grad, num) < tol, p.name


class TestForward:
    def test_matmul_values(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[17.0], [39.0]])

    def test_matmul_rejects_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_rejects_non_2d(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))

    def test_broadcast_add(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.arange(3.0))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            Tensor([0.0, 1.0]).log()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_is_reported(self):
        with pytest.raises(NonFiniteError):
            Tensor([1000.0]).exp()

    def test_max_tie_goes_to_lowest_index(self):
        p = Parameter(np.array([2.0, 5.0, 5.0, 1.0]), "p")
        backward(reduce("max", p))
        np.testing.assert_array_equal(p.grad, [0, 1, 0, 0])

    def test_unknown_kinds(self):
        with pytest.raises(ValueError):
            activation("gelu", Tensor([1.0]))
        with pytest.raises(ValueError):
            elementwise("mod", Tensor([1.0]), Tensor([1.0]))
        with pytest.raises(ValueError):
            reduce("prod", Tensor([1.0]))

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            reduce("sum", Tensor(np.ones((2, 2))), axis=2)

    def test_numpy_operands_stay_tensors(self):
        out = np.ones(3) * Tensor(np.arange(3.0))
        assert isinstance(out, Tensor)

    def test_cumsum_values(self):
        np.testing.assert_array_equal(cumsum(Tensor([1.0, 2.0, 3.0])).data, [1, 3, 6])

    def test_logsumexp_matches_naive(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(logsumexp(Tensor(x), axis=1).data, np.log(np.exp(x).sum(axis=1)))


ACTIVATIONS = ["sigmoid", "tanh", "relu", "softplus", "exp", "log", "neg", "expm1", "log1p", "lgamma", "digamma"]


class TestGradients:
    @pytest.mark.parametrize("kind", ACTIVATIONS)
    def test_activation(self, kind, rng):
        # positive inputs away from the relu kink keep every kind differentiable
        x = rng.uniform(0.3, 2.0, size=(3, 4))
        check_grad(lambda p: (activation(kind, p) * Tensor(np.arange(12.0).reshape(3, 4))).sum(), x)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow"])
    def test_elementwise_broadcast(self, op, rng):
        a = rng.uniform(0.5, 2.0, size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,))
        check_grad(lambda p, q: elementwise(op, p, q).sum(), a, b)

    def test_matmul(self, rng):
        check_grad(lambda a, b: (matmul(a, b) ** 2).sum(), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))

    @pytest.mark.parametrize("kind", ["sum", "mean", "max"])
    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_reduce(self, kind, axis, rng):
        w = rng.normal(size=(3,) if axis == 1 else (4,) if axis == 0 else ())
        check_grad(lambda p: (reduce(kind, p, axis=axis) * Tensor(w)).sum(), rng.normal(size=(3, 4)))

    def test_concat_cumsum_clip_logsumexp(self, rng):
        def build(a, b):
            c = concat([a, b], axis=1)
            return (cumsum(c, axis=1).sigmoid() + logsumexp(c, axis=1).reshape(3, 1) + clip(c, -0.5, 0.5) * 3.0).sum()

        check_grad(build, rng.normal(size=(3, 2)), rng.normal(size=(3, 3)))

    def test_reuse_accumulates(self, rng):
        check_grad(lambda p: (p * p * p + p.exp() * p).sum(), rng.normal(size=5))

    def test_mlp_like_graph(self, rng):
        def build(w1, w2, x):
            h = matmul(x, w1).tanh()
            return (matmul(h, w2).softplus()).mean()

        check_grad(build, rng.normal(size=(4, 6)), rng.normal(size=(6, 2)), rng.normal(size=(5, 4)))


class TestBackwardMechanics:
    def test_repeated_backward_accumulates(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        loss = (p * p).sum()
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(p.grad, [4.0, 8.0])

    def test_non_scalar_rejected(self):
        p = Parameter(np.ones(2), "p")
        with pytest.raises(DimensionError):
            backward(p * 2.0)

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones(2), "p")
        with no_grad():
            out = (p * 3.0).sum()
        assert not out.requires_grad
        assert len(record(out)) == 0

    def test_no_grad_is_thread_local(self):
        p = Parameter(np.ones(2), "p")
        seen = {}

        def worker():
            seen["rg"] = (p * 2.0).requires_grad

        with no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["rg"] is True

    def test_record_in_creation_order(self):
        p = Parameter(np.ones(2), "p")
        a = p * 2.0
        b = a.exp()
        c = (a + b).sum()
        seqs = [n._seq for n in record(c).nodes]
        assert seqs == sorted(seqs)
        assert record(c).nodes[-1] is c

    def test_detach_blocks_gradient(self):
        p = Parameter(np.array([3.0]), "p")
        backward((p * p.detach()).sum())
        np.testing.assert_array_equal(p.grad, [3.0])


class TestGradientCheck:
    def test_reports_small_error_for_correct_rules(self, rng):
        p = Parameter(rng.normal(size=(3, 3)), "p")
        assert gradient_check(lambda: (p.tanh() * p).sum(), [p]) < 1e-7

    def test_detects_nondeterminism(self):
        p = Parameter(np.ones(2), "p")
        draws = iter(range(100))
        with pytest.raises(NondeterminismError):
            gradient_check(lambda: (p * float(next(draws))).sum(), [p])


finite = st.floats(-5, 5, allow_nan=False, width=64)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=4), elements=finite))
    def test_sum_gradient_is_ones(self, x):
        p = Parameter(x.copy(), "p")
        backward(p.sum())
        np.testing.assert_array_equal(p.grad, np.ones_like(x))

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
    def test_linearity_of_backward(self, x):
        p = Parameter(x.copy(), "p")
        backward((p.sigmoid() * 2.0 + p.tanh()).sum())
        g_joint = p.grad.copy()
        p.grad = None
        backward((p.sigmoid() * 2.0).sum())
        backward(p.tanh().sum())
        np.testing.assert_allclose(p.grad, g_joint, rtol=1e-12, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
    def test_softmax_rows_via_logsumexp(self, x):
        probs = (Tensor(x) - logsumexp(Tensor(x), axis=1).reshape(x.shape[0], 1)).exp()
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=1e-12)
