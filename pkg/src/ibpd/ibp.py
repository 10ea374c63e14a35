"""Truncated stick-breaking construction of the Beta-Bernoulli process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, cumsum


@dataclass(frozen=True)
class IBPConfig:
    alpha: float = 10.0
    beta: float = 1.0
    K: int = 50

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("truncation level K must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass
class StickState:
    nu: np.ndarray
    pi: np.ndarray


def sticks_to_pi(nu) -> Tensor:
    """pi_k = prod_{i<=k} nu_i, accumulated in log space."""
    nu = as_tensor(nu)
    if np.any(nu.data <= 0) or np.any(nu.data >= 1):
        raise ValueError("stick proportions must lie strictly inside (0, 1)")
    return cumsum(nu.log(), axis=-1).exp()


def sample_prior(cfg: IBPConfig, n: int, rng: np.random.Generator) -> tuple[StickState, np.ndarray]:
    """Draw sticks nu_k ~ Beta(alpha, beta) and a binary [n, K] feature matrix."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g1 = rng.gamma(cfg.alpha, size=cfg.K)
    g2 = rng.gamma(cfg.beta, size=cfg.K)
    nu = g1 / (g1 + g2)
    # a saturated stick can round to exactly 1.0 (or underflow to 0.0)
    nu = np.clip(nu, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    pi = sticks_to_pi(nu).data
    Z = (rng.uniform(size=(n, cfg.K)) < pi).astype(np.float64)
    return StickState(nu, pi), Z


def expected_active(cfg: IBPConfig) -> float:
    """Expected number of active features per row under the truncated prior.

    Sticks are independent, so E[pi_k] = (alpha / (alpha + beta))^k exactly.
    """
    r = cfg.alpha / (cfg.alpha + cfg.beta)
    k = np.arange(1, cfg.K + 1)
    return float(np.sum(r**k))
