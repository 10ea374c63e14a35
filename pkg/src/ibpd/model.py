"""Conditional IBP-VAE and its two baselines.

Three model kinds share one class hierarchy:

* ``Classifier``: task trunk only, trained on cross-entropy.
* ``CVAE``: adds a Gaussian confounder encoder and a decoder conditioned on
  the one-hot task label, ``y_c = A``.
* ``CIBPVAE``: additionally gates A by binary features Z whose prior comes
  from a truncated stick-breaking process, ``y_c = Z * A``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import distributions as D
from .ibp import IBPConfig, sticks_to_pi
from .tensor import Parameter, Tensor, as_tensor, clip, concat, logsumexp, no_grad

MODEL_KINDS = ("cibp-vae", "c-vae", "classifier")
LIKELIHOODS = ("gaussian_fixed_var", "bernoulli")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    input_dim: int
    task_classes: int = 10
    K: int = 50
    conf_hidden: tuple[int, ...] = (256, 256)
    task_hidden: tuple[int, ...] = (256, 256)
    dec_hidden: tuple[int, ...] = (256, 256)
    alpha: float = 10.0
    beta: float = 1.0
    likelihood: str = "gaussian_fixed_var"
    zeta: float = 10.0
    temperature: float = 0.5
    z_fusion: str = "logit_add"
    kind: str = "cibp-vae"
    init_seed: int = 0

    def __post_init__(self):
        self.conf_hidden = tuple(int(h) for h in self.conf_hidden)
        self.task_hidden = tuple(int(h) for h in self.task_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        if min(self.input_dim, self.task_classes, self.K) < 1:
            raise ValueError("model dimensions must be positive")
        if any(h < 1 for h in self.conf_hidden + self.task_hidden + self.dec_hidden):
            raise ValueError("hidden sizes must be positive")
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        if self.z_fusion not in ("logit_add", "gate"):
            raise ValueError("z_fusion must be 'logit_add' or 'gate'")

    @property
    def ibp(self) -> IBPConfig:
        return IBPConfig(self.alpha, self.beta, self.K)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("conf_hidden", "task_hidden", "dec_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _init_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name, so models sharing a sub-network share its init
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, seed: int):
        std = math.sqrt(2.0 / (n_in + n_out))
        self.weight = Parameter(_init_rng(seed, f"{name}/weight").normal(0.0, std, (n_in, n_out)), f"{name}/weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}/bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MLP:
    """Stack of Linear layers; the activation follows every layer."""

    def __init__(self, name: str, sizes, activation: str, seed: int):
        self.layers = [Linear(f"{name}/layer{i}", a, b, seed) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = getattr(layer(x), self.activation)()
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class EncoderOutputs:
    task_logits: Tensor
    task_features: Tensor
    mu: Tensor | None = None
    log_var: Tensor | None = None
    d_logits: Tensor | None = None


@dataclass
class LatentSample:
    A: Tensor
    y_c: Tensor
    nu: Tensor | None = None
    pi: Tensor | None = None
    z_logits: Tensor | None = None
    Z: Tensor | None = None


@dataclass
class Noise:
    """Every random input to one stochastic forward pass."""

    eps: np.ndarray
    u_nu: np.ndarray | None = None
    u_z: np.ndarray | None = None

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, K: int) -> Noise:
        u_nu = rng.uniform(size=K)
        u_z = rng.uniform(size=(n, K))
        eps = rng.standard_normal((n, K))
        return cls(eps=eps, u_nu=u_nu, u_z=u_z)

    @classmethod
    def zeros(cls, n: int, K: int) -> Noise:
        """Median noise: eps = 0 and u = 1/2."""
        return cls(eps=np.zeros((n, K)), u_nu=np.full(K, 0.5), u_z=np.full((n, K), 0.5))


@dataclass
class LossTerms:
    recon: float = 0.0
    kl_sticks: float = 0.0
    kl_z: float = 0.0
    kl_a: float = 0.0
    ce: float = 0.0
    elbo_loss: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def one_hot(labels, T: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], T))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    onehot = one_hot(labels, logits.shape[1])
    return (logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)).mean()


def posterior_z_logits(pi, d_logits, fusion: str = "logit_add") -> Tensor:
    """Logits of q(z_nk | nu, x_n) from the global stick prob and per-example evidence."""
    pi = clip(as_tensor(pi), D.PROB_EPS, 1.0 - D.PROB_EPS)
    d_logits = as_tensor(d_logits)
    if fusion == "logit_add":
        return (pi.log() - (1.0 - pi).log()) + d_logits
    q = clip(pi * d_logits.sigmoid(), D.PROB_EPS, 1.0 - D.PROB_EPS)
    return q.log() - (1.0 - q).log()


class Classifier:
    kind = "classifier"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        sizes = (cfg.input_dim,) + cfg.task_hidden
        self.task_trunk = MLP("task_encoder", sizes, "relu", cfg.init_seed)
        self.task_head = Linear("task_encoder/head", sizes[-1], cfg.task_classes, cfg.init_seed)

    def parameters(self) -> list[Parameter]:
        return self.task_trunk.parameters() + self.task_head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        params = self.parameters()
        named = {p.name: p for p in params}
        if len(named) != len(params):
            raise RuntimeError("duplicate parameter names")
        return named

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected input of shape [n, {self.cfg.input_dim}], got {x.shape}")
        return x

    def encode(self, x) -> EncoderOutputs:
        x = self._check_input(x)
        features = self.task_trunk(x)
        return EncoderOutputs(task_logits=self.task_head(features), task_features=features)

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return np.argmax(self.encode(x).task_logits.data, axis=1)

    def supervised_loss(self, x, labels, noise: Noise | None = None, n_total: int | None = None, hard=False):
        enc = self.encode(x)
        ce = cross_entropy(enc.task_logits, labels)
        return ce, LossTerms(ce=ce.item(), total=ce.item())


class CVAE(Classifier):
    kind = "c-vae"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        K, T = cfg.K, cfg.task_classes
        sizes = (cfg.input_dim,) + cfg.conf_hidden
        self.conf_trunk = MLP("conf_encoder", sizes, "tanh", cfg.init_seed)
        self.mu_head = Linear("conf_encoder/mu", sizes[-1], K, cfg.init_seed)
        self.log_var_head = Linear("conf_encoder/log_var", sizes[-1], K, cfg.init_seed)
        self.temperature = cfg.temperature
        dec_sizes = (K + T,) + cfg.dec_hidden
        self.dec_trunk = MLP("decoder", dec_sizes, "relu", cfg.init_seed)
        self.dec_out = Linear("decoder/out", dec_sizes[-1], cfg.input_dim, cfg.init_seed)

    def parameters(self) -> list[Parameter]:
        return (
            super().parameters()
            + self.conf_trunk.parameters()
            + self.mu_head.parameters()
            + self.log_var_head.parameters()
            + self.dec_trunk.parameters()
            + self.dec_out.parameters()
        )

    def _conf_features(self, x: Tensor) -> Tensor:
        return self.conf_trunk(x)

    def encode(self, x) -> EncoderOutputs:
        x = self._check_input(x)
        out = super().encode(x)
        h = self._conf_features(x)
        out.mu = self.mu_head(h)
        out.log_var = self.log_var_head(h)
        return out

    def sample_latent(self, enc: EncoderOutputs, noise: Noise, hard: bool = False) -> LatentSample:
        A = D.gaussian_sample(D.DiagGaussianParams(enc.mu, enc.log_var), noise.eps)
        return LatentSample(A=A, y_c=A)

    def decoder_logits(self, y_c, y_t) -> Tensor:
        y_c, y_t = as_tensor(y_c), as_tensor(y_t)
        if y_c.shape[1] != self.cfg.K or y_t.shape[1] != self.cfg.task_classes:
            raise ValueError(f"decoder expects widths ({self.cfg.K}, {self.cfg.task_classes}), got {y_c.shape}, {y_t.shape}")
        return self.dec_out(self.dec_trunk(concat([y_c, y_t], axis=1)))

    def decode(self, y_c, y_t) -> Tensor:
        """Mean of p(x | y_c, y_t): identity output for Gaussian, sigmoid for Bernoulli."""
        out = self.decoder_logits(y_c, y_t)
        return out.sigmoid() if self.cfg.likelihood == "bernoulli" else out

    def recon_nll(self, x, y_c, y_t) -> Tensor:
        """Per-example negative log-likelihood, shape [n]."""
        x = as_tensor(x)
        out = self.decoder_logits(y_c, y_t)
        if self.cfg.likelihood == "bernoulli":
            return (out.softplus() - out * x).sum(axis=1)
        diff = out - x
        return (diff * diff).sum(axis=1) * 0.5 + 0.5 * self.cfg.input_dim * LOG_2PI

    def _kl_terms(self, enc: EncoderOutputs, latent: LatentSample, batch_fraction: float):
        kl_a = D.kl_gaussian_standard(D.DiagGaussianParams(enc.mu, enc.log_var)).sum()
        return kl_a, None, None

    def elbo(self, x, labels, noise: Noise, n_total: int | None = None, hard: bool = False):
        """Negative ELBO summed over the batch, plus a per-term breakdown.

        The global stick KL is weighted by ``batch_size / n_total`` so that one
        pass over the data counts it exactly once.
        """
        x = self._check_input(x)
        n = x.shape[0]
        batch_fraction = 1.0 if n_total is None else n / n_total
        enc = self.encode(x)
        latent = self.sample_latent(enc, noise, hard=hard)
        return self._elbo_from(x, labels, enc, latent, batch_fraction)

    def _elbo_from(self, x, labels, enc, latent, batch_fraction):
        y_t = one_hot(labels, self.cfg.task_classes)
        recon = self.recon_nll(x, latent.y_c, y_t).sum()
        kl_a, kl_z, kl_sticks = self._kl_terms(enc, latent, batch_fraction)
        loss = recon + kl_a
        terms = LossTerms(recon=recon.item(), kl_a=kl_a.item())
        if kl_z is not None:
            loss = loss + kl_z + kl_sticks
            terms.kl_z = kl_z.item()
            terms.kl_sticks = kl_sticks.item()
        terms.elbo_loss = terms.total = loss.item()
        return loss, terms, enc

    def supervised_loss(self, x, labels, noise: Noise, n_total: int | None = None, hard: bool = False):
        """Negative ELBO + zeta * mean task cross-entropy."""
        loss, terms, enc = self.elbo(x, labels, noise, n_total=n_total, hard=hard)
        ce = cross_entropy(enc.task_logits, labels)
        total = loss + self.cfg.zeta * ce
        terms.ce = ce.item()
        terms.total = total.item()
        return total, terms

    def reconstruct(self, x, noise: Noise, y_t=None, hard: bool = True) -> np.ndarray:
        """Decoder mean for x; y_t defaults to the model's own predicted one-hot labels."""
        with no_grad():
            enc = self.encode(x)
            latent = self.sample_latent(enc, noise, hard=hard)
            if y_t is None:
                y_t = one_hot(np.argmax(enc.task_logits.data, axis=1), self.cfg.task_classes)
            return self.decode(latent.y_c, y_t).data


class CIBPVAE(CVAE):
    kind = "cibp-vae"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        K = cfg.K
        self.d_head = Linear("conf_encoder/d_logits", cfg.conf_hidden[-1], K, cfg.init_seed)
        # start the stick posterior at the prior: Kumaraswamy(alpha, 1) == Beta(alpha, 1)
        self.raw_a = Parameter(np.full(K, _inverse_softplus(cfg.alpha)), "sticks/raw_a")
        self.raw_b = Parameter(np.full(K, _inverse_softplus(cfg.beta)), "sticks/raw_b")

    def parameters(self) -> list[Parameter]:
        return super().parameters() + self.d_head.parameters() + [self.raw_a, self.raw_b]

    def stick_posterior(self) -> D.KumaraswamyParams:
        return D.KumaraswamyParams.from_unconstrained(self.raw_a, self.raw_b)

    def encode(self, x) -> EncoderOutputs:
        x = self._check_input(x)
        out = Classifier.encode(self, x)
        h = self._conf_features(x)
        out.mu = self.mu_head(h)
        out.log_var = self.log_var_head(h)
        out.d_logits = self.d_head(h)
        return out

    def sample_latent(self, enc: EncoderOutputs, noise: Noise, hard: bool = False) -> LatentSample:
        # one global nu for the whole batch, then local Z and A per row
        nu = D.kumaraswamy_sample(self.stick_posterior(), noise.u_nu)
        pi = sticks_to_pi(nu)
        z_logits = posterior_z_logits(pi, enc.d_logits, self.cfg.z_fusion)
        Z = D.relaxed_bernoulli_sample(D.BernoulliLogits(z_logits, self.temperature), noise.u_z, hard=hard)
        A = D.gaussian_sample(D.DiagGaussianParams(enc.mu, enc.log_var), noise.eps)
        return LatentSample(A=A, y_c=Z * A, nu=nu, pi=pi, z_logits=z_logits, Z=Z)

    def _kl_terms(self, enc, latent, batch_fraction):
        kl_a, _, _ = super()._kl_terms(enc, latent, batch_fraction)
        kl_z = D.kl_bernoulli(latent.z_logits.sigmoid(), latent.pi).sum()
        prior = D.BetaParams(self.cfg.alpha, self.cfg.beta)
        kl_sticks = D.kl_kumaraswamy_beta(self.stick_posterior(), prior).sum() * batch_fraction
        return kl_a, kl_z, kl_sticks


def build_model(cfg: ModelConfig):
    return {"cibp-vae": CIBPVAE, "c-vae": CVAE, "classifier": Classifier}[cfg.kind](cfg)


def build_cvae_baseline(cfg: ModelConfig) -> CVAE:
    return CVAE(_with_kind(cfg, "c-vae"))


def build_classifier_baseline(cfg: ModelConfig) -> Classifier:
    return Classifier(_with_kind(cfg, "classifier"))


def _with_kind(cfg: ModelConfig, kind: str) -> ModelConfig:
    d = cfg.to_dict()
    d["kind"] = kind
    return ModelConfig.from_dict(d)
