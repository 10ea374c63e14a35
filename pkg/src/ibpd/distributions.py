"""Reparameterised samplers and closed-form KL terms for the stick-breaking VAE.

All randomness is passed in explicitly (uniform or standard-normal noise
arrays), so every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .tensor import Tensor, activation, as_tensor, clip

EULER_GAMMA = 0.5772156649015329
PROB_EPS = 1e-7
UNIFORM_EPS = 1e-7


@dataclass
class KumaraswamyParams:
    a: Tensor
    b: Tensor

    def __post_init__(self):
        self.a, self.b = as_tensor(self.a), as_tensor(self.b)
        if np.any(self.a.data <= 0) or np.any(self.b.data <= 0):
            raise ValueError("Kumaraswamy shape parameters must be strictly positive")

    @classmethod
    def from_unconstrained(cls, raw_a: Tensor, raw_b: Tensor) -> KumaraswamyParams:
        return cls(raw_a.softplus(), raw_b.softplus())

    def mean(self) -> np.ndarray:
        a, b = self.a.data, self.b.data
        return b * special.beta(1.0 + 1.0 / a, b)


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")


@dataclass
class DiagGaussianParams:
    mu: Tensor
    log_var: Tensor


@dataclass
class BernoulliLogits:
    logits: Tensor
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def probs(self) -> Tensor:
        return self.logits.sigmoid()


def _clamp_uniform(u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)


def log_beta_fn(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return activation("lgamma", x) + activation("lgamma", y) - activation("lgamma", x + y)


def kumaraswamy_sample(params: KumaraswamyParams, u) -> Tensor:
    """Inverse-CDF draw ``(1 - (1-u)^(1/b))^(1/a)``, differentiable in a and b."""
    log_1mu = np.log1p(-_clamp_uniform(u))
    # 1 - (1-u)^(1/b) written with expm1 so that large b keeps precision
    inner = -activation("expm1", log_1mu / params.b)
    nu = (activation("log", inner) / params.a).exp()
    return clip(nu, UNIFORM_EPS, 1.0 - UNIFORM_EPS)


def kl_kumaraswamy_beta(q: KumaraswamyParams, p: BetaParams, terms: int = 100) -> Tensor:
    """KL(Kumaraswamy(a, b) || Beta(alpha, beta)) per stick.

    The E[log(1 - v)] piece is an infinite series of Beta functions.  The
    first ``terms`` terms are summed exactly and the remainder is replaced by
    its integral estimate ``Gamma(b) * ((M + 1/2)/a + b/2)^(-b) / b``.  The
    whole series drops out when beta == 1.
    """
    if terms < 1:
        raise ValueError("terms must be >= 1")
    a, b = q.a, q.b
    alpha, beta = p.alpha, p.beta
    ab = a * b
    kl = (a - alpha) / a * (-EULER_GAMMA - activation("digamma", b) - 1.0 / b)
    kl = kl + ab.log() + float(log_beta_fn(alpha, beta).data) - (b - 1.0) / b
    if beta != 1.0:
        m = np.arange(1, terms + 1, dtype=np.float64).reshape((terms,) + (1,) * a.ndim)
        series = (log_beta_fn(m / a, b).exp() / (ab + m)).sum(axis=0)
        tail = activation("lgamma", b).exp() * (((terms + 0.5) / a + b * 0.5) ** (-b)) / b
        kl = kl + (beta - 1.0) * b * (series + tail)
    return kl


def relaxed_bernoulli_sample(b: BernoulliLogits, u, hard: bool = False) -> Tensor:
    """Binary Concrete sample; ``hard`` thresholds at 0.5 with a straight-through gradient."""
    u = _clamp_uniform(u)
    logistic = np.log(u) - np.log1p(-u)
    soft = ((b.logits + logistic) / b.temperature).sigmoid()
    if not hard:
        return soft
    hard_value = (soft.data > 0.5).astype(np.float64)
    return soft + (hard_value - soft.data)


def kl_bernoulli(q_prob, p_prob) -> Tensor:
    q = clip(as_tensor(q_prob), PROB_EPS, 1.0 - PROB_EPS)
    p = clip(as_tensor(p_prob), PROB_EPS, 1.0 - PROB_EPS)
    return q * (q.log() - p.log()) + (1.0 - q) * ((1.0 - q).log() - (1.0 - p).log())


def gaussian_sample(g: DiagGaussianParams, eps) -> Tensor:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mu.shape:
        raise ValueError(f"noise shape {eps.shape} does not match mean shape {g.mu.shape}")
    return g.mu + (g.log_var * 0.5).exp() * eps


def kl_gaussian_standard(g: DiagGaussianParams) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    per_dim = g.mu * g.mu + g.log_var.exp() - g.log_var - 1.0
    return per_dim.sum(axis=-1) * 0.5
