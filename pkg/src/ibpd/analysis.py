"""Post-training analyses: probes, reconstruction breakdown, feature counts,
triggering units, unit ablation and representation swapping.

Every function here treats the model as frozen and draws latent noise from a
generator seeded by an explicit ``seed`` so reports are reproducible.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .model import Noise, one_hot
from .tensor import Tensor, no_grad

ANALYSIS_BATCH = 1024


@dataclass
class Representations:
    y_t: np.ndarray
    y_c: np.ndarray
    Z: np.ndarray | None
    task_pred: np.ndarray
    seed: int


def _batches(n: int, size: int = ANALYSIS_BATCH):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def _encode_sample(model, x, seed: int):
    """Yield (slice, encoder outputs, hard latent sample) batch by batch."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    with no_grad():
        for sl in _batches(x.shape[0]):
            xb = x[sl]
            enc = model.encode(xb)
            latent = model.sample_latent(enc, Noise.draw(rng, xb.shape[0], model.cfg.K), hard=True)
            yield sl, enc, latent


def extract_representations(model, x, seed: int = 0) -> Representations:
    """Penultimate task-trunk activations, y_c and hard Z for every row of x."""
    y_t, y_c, Z, pred = [], [], [], []
    for _, enc, latent in _encode_sample(model, x, seed):
        y_t.append(enc.task_features.data)
        y_c.append(latent.y_c.data)
        pred.append(np.argmax(enc.task_logits.data, axis=1))
        if latent.Z is not None:
            Z.append(latent.Z.data)
    return Representations(
        y_t=np.concatenate(y_t),
        y_c=np.concatenate(y_c),
        Z=np.concatenate(Z) if Z else None,
        task_pred=np.concatenate(pred),
        seed=seed,
    )


def _resolve_y_t(model, enc, y_t, sl) -> np.ndarray:
    if y_t is None:
        return one_hot(np.argmax(enc.task_logits.data, axis=1), model.cfg.task_classes)
    y_t = np.asarray(y_t)
    if y_t.ndim == 1:
        return one_hot(y_t[sl], model.cfg.task_classes)
    return y_t[sl]


def reconstruct(model, x, y_t=None, seed: int = 0) -> np.ndarray:
    """Decoder mean under a hard posterior sample.

    ``y_t`` may be integer labels, an [n, T] matrix, or None for the model's
    own predicted one-hot labels.
    """
    return ablate_generate(model, x, [], y_t=y_t, seed=seed)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    test_fraction: float = 0.5
    l2: float = 1e-3
    max_iter: int = 1000
    nonlinear: bool = False
    hidden: int = 64
    seed: int = 0


@dataclass
class ProbeReport:
    accuracy: dict[tuple[str, str], float]
    chance: dict[str, float]
    n_classes: dict[str, int] = field(default_factory=dict)

    def get(self, representation: str, target: str) -> float:
        return self.accuracy[(representation, target)]

    def to_csv(self) -> str:
        reps = sorted({r for r, _ in self.accuracy})
        targets = list(self.chance)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["representation", *targets])
        for r in reps:
            w.writerow([r, *(repr(self.accuracy[(r, t)]) for t in targets)])
        w.writerow(["random", *(repr(self.chance[t]) for t in targets)])
        return buf.getvalue()


def _fit_softmax_regression(X, y, n_classes, l2, max_iter):
    n, d = X.shape
    Y = np.eye(n_classes)[y]

    def objective(w):
        W = w[: d * n_classes].reshape(d, n_classes)
        b = w[d * n_classes :]
        logits = X @ W + b
        lse = special.logsumexp(logits, axis=1)
        loss = np.mean(lse - np.sum(logits * Y, axis=1)) + 0.5 * l2 * np.sum(W * W)
        P = np.exp(logits - lse[:, None])
        G = (P - Y) / n
        grad = np.concatenate([(X.T @ G + l2 * W).ravel(), G.sum(axis=0)])
        return loss, grad

    res = optimize.minimize(objective, np.zeros(d * n_classes + n_classes), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    W = res.x[: d * n_classes].reshape(d, n_classes)
    b = res.x[d * n_classes :]
    return lambda Z: np.argmax(Z @ W + b, axis=1)


def _fit_mlp_probe(X, y, n_classes, cfg: ProbeConfig):
    from .model import MLP, Linear, cross_entropy
    from .training import Adam
    from .tensor import backward

    trunk = MLP("probe/trunk", (X.shape[1], cfg.hidden), "relu", cfg.seed)
    head = Linear("probe/head", cfg.hidden, n_classes, cfg.seed)
    params = trunk.parameters() + head.parameters()
    opt = Adam(lr=1e-2)
    for _ in range(cfg.max_iter // 2):
        for p in params:
            p.grad = None
        loss = cross_entropy(head(trunk(Tensor(X))), y)
        backward(loss)
        opt.step(params)

    def predict(Z):
        with no_grad():
            return np.argmax(head(trunk(Tensor(Z))).data, axis=1)

    return predict


def probe_accuracy(features, targets, cfg: ProbeConfig | None = None, test_features=None, test_targets=None) -> float:
    """Held-out accuracy of a softmax probe trained on frozen features.

    Without explicit test data the rows are split at random into probe-train
    and probe-test parts (``cfg.test_fraction`` held out).
    """
    cfg = cfg or ProbeConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets)
    classes, y_idx = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("probe target has a single class")
    if test_features is None:
        perm = np.random.default_rng(cfg.seed).permutation(X.shape[0])
        n_test = int(round(cfg.test_fraction * X.shape[0]))
        test, train = perm[:n_test], perm[n_test:]
        Xtr, ytr, Xte, yte = X[train], y_idx[train], X[test], y_idx[test]
    else:
        Xtr, ytr = X, y_idx
        Xte = np.asarray(test_features, dtype=np.float64)
        lookup = {c: i for i, c in enumerate(classes)}
        yte = np.array([lookup.get(v, -1) for v in np.asarray(test_targets)])
    mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    std[std < 1e-12] = 1.0
    Xtr, Xte = (Xtr - mean) / std, (Xte - mean) / std
    if cfg.nonlinear:
        predict = _fit_mlp_probe(Xtr, ytr, classes.size, cfg)
    else:
        predict = _fit_softmax_regression(Xtr, ytr, classes.size, cfg.l2, cfg.max_iter)
    return float(np.mean(predict(Xte) == yte))


def probe(representations: dict[str, np.ndarray], targets: dict[str, np.ndarray], cfg: ProbeConfig | None = None) -> ProbeReport:
    """Accuracy matrix of every (representation, target) pair plus chance levels."""
    cfg = cfg or ProbeConfig()
    acc = {}
    for rname, feats in representations.items():
        for tname, labels in targets.items():
            acc[(rname, tname)] = probe_accuracy(feats, labels, cfg)
    n_classes = {t: int(np.unique(v).size) for t, v in targets.items()}
    return ProbeReport(acc, {t: 1.0 / k for t, k in n_classes.items()}, n_classes)


# ---------------------------------------------------------------------------
# reconstruction breakdown
# ---------------------------------------------------------------------------


@dataclass
class ReconBreakdown:
    whole: float
    artifact_all: float
    artifact_non_stimulus: float | None
    artifact_stimulus: float | None
    fraction_stimulus: float

    def as_row(self) -> list:
        return [self.whole, self.artifact_all, self.artifact_non_stimulus, self.artifact_stimulus]


def breakdown_from_reconstruction(x, recon, flags, artifact_index) -> ReconBreakdown:
    x = np.asarray(x)
    flags = np.asarray(flags, dtype=bool)
    sq = (np.asarray(recon) - x) ** 2
    region = sq[:, artifact_index].mean(axis=1)
    return ReconBreakdown(
        whole=float(sq.mean()),
        artifact_all=float(region.mean()),
        artifact_non_stimulus=float(region[~flags].mean()) if np.any(~flags) else None,
        artifact_stimulus=float(region[flags].mean()) if np.any(flags) else None,
        fraction_stimulus=float(flags.mean()),
    )


def recon_breakdown(model, x, flags, artifact_index, labels=None, seed: int = 0) -> ReconBreakdown:
    """Mean squared reconstruction error over the whole signal and the artifact window.

    Reconstructions decode a hard posterior sample (Z and A both sampled)
    conditioned on ``labels`` when given, else on the predicted labels.
    """
    recon = reconstruct(model, x, y_t=labels, seed=seed)
    return breakdown_from_reconstruction(x, recon, flags, artifact_index)


# ---------------------------------------------------------------------------
# binary features
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    n: int
    mean: float
    mode: int
    histogram: np.ndarray


def _count_stats(counts: np.ndarray, K: int) -> FeatureStats:
    hist = np.bincount(counts, minlength=K + 1)
    return FeatureStats(n=int(counts.size), mean=float(counts.mean()), mode=int(np.argmax(hist)), histogram=hist)


def active_feature_stats(Z, flags=None) -> dict:
    """Per-example active counts summarised for all rows and each flag group."""
    Z = np.asarray(Z)
    if not np.all((Z == 0) | (Z == 1)):
        raise ValueError("Z must be binary")
    K = Z.shape[1]
    counts = Z.sum(axis=1).astype(np.int64)
    out = {"all": _count_stats(counts, K)}
    if flags is not None:
        flags = np.asarray(flags, dtype=bool)
        for key, sel in ((0, ~flags), (1, flags)):
            if np.any(sel):
                out[key] = _count_stats(counts[sel], K)
    return out


@dataclass
class TriggerUnitReport:
    rate0: np.ndarray
    rate1: np.ndarray
    gap: np.ndarray
    ranking: np.ndarray
    selected: list[int]
    threshold: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "unit", "rate_group0", "rate_group1", "gap", "selected"])
        chosen = set(self.selected)
        for r, k in enumerate(self.ranking):
            w.writerow([r, int(k), repr(float(self.rate0[k])), repr(float(self.rate1[k])), repr(float(self.gap[k])), int(k in chosen)])
        return buf.getvalue()


def find_triggering_units(Z, flags, gap_threshold: float = 0.9) -> TriggerUnitReport:
    """Rank units by |activation rate in group 1 - rate in group 0|."""
    Z = np.asarray(Z, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if not np.any(flags) or np.all(flags):
        raise ValueError("both groups must be non-empty")
    rate0 = Z[~flags].mean(axis=0)
    rate1 = Z[flags].mean(axis=0)
    gap = np.abs(rate1 - rate0)
    ranking = np.argsort(-gap, kind="stable")
    selected = [int(k) for k in ranking if gap[k] >= gap_threshold]
    return TriggerUnitReport(rate0, rate1, gap, ranking, selected, gap_threshold)


# ---------------------------------------------------------------------------
# generation with edited latents
# ---------------------------------------------------------------------------


def parse_unit_ops(spec, K: int) -> list[tuple[int, str]]:
    """Accept a list of (unit, 'on'|'off') pairs or the shorthands 'all-off' / 'all-on'."""
    if isinstance(spec, str):
        if spec in ("all-off", "all-on"):
            return [(k, spec[4:]) for k in range(K)]
        ops = []
        for item in filter(None, spec.split(",")):
            unit, _, state = item.partition(":")
            ops.append((int(unit), state or "off"))
        spec = ops
    return [(int(k), str(state)) for k, state in spec]


def ablate_generate(model, x, unit_ops, y_t=None, seed: int = 0) -> np.ndarray:
    """Decode x after forcing selected Z units on or off."""
    K = model.cfg.K
    ops = parse_unit_ops(unit_ops, K)
    for k, state in ops:
        if not 0 <= k < K:
            raise IndexError(f"unit {k} out of range for K={K}")
        if state not in ("on", "off"):
            raise ValueError(f"unit state must be 'on' or 'off', got {state!r}")
    if ops and getattr(model, "kind", None) != "cibp-vae":
        raise ValueError("unit ablation needs a model with binary features")
    out = []
    with no_grad():
        for sl, enc, latent in _encode_sample(model, x, seed):
            y_c = latent.y_c
            if ops:
                Z = latent.Z.data.copy()
                for k, state in ops:
                    Z[:, k] = 1.0 if state == "on" else 0.0
                y_c = Tensor(Z * latent.A.data)
            out.append(model.decode(y_c, _resolve_y_t(model, enc, y_t, sl)).data)
    return np.concatenate(out)


def confounder_codes(model, x, seed: int = 0) -> np.ndarray:
    return extract_representations(model, x, seed).y_c


def swap_representations(model, x_style_source, x_task_source, seed: int = 0) -> np.ndarray:
    """Decode y_c of each style row with the predicted task label of the paired task row."""
    y_c = confounder_codes(model, x_style_source, seed)
    y_t = one_hot(model.predict(x_task_source), model.cfg.task_classes)
    with no_grad():
        return model.decode(Tensor(y_c), y_t).data


def swap_grid(model, task_sources, style_sources, seed: int = 0) -> np.ndarray:
    """All style x task combinations, shape [n_style, n_task, input_dim]."""
    y_c = confounder_codes(model, style_sources, seed)
    y_t = one_hot(model.predict(task_sources), model.cfg.task_classes)
    n_s, n_t = y_c.shape[0], y_t.shape[0]
    with no_grad():
        out = model.decode(Tensor(np.repeat(y_c, n_t, axis=0)), np.tile(y_t, (n_s, 1))).data
    return out.reshape(n_s, n_t, -1)


# ---------------------------------------------------------------------------
# colour metrics
# ---------------------------------------------------------------------------


def _channels(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], 3, -1)


def channel_dominance(images) -> np.ndarray:
    """Largest mean absolute difference between any two colour channels, per image."""
    c = _channels(images)
    pairs = [(0, 1), (0, 2), (1, 2)]
    return np.max([np.abs(c[:, i] - c[:, j]).mean(axis=1) for i, j in pairs], axis=0)


def dominant_channel(images) -> np.ndarray:
    """Index (0=red, 1=green, 2=blue) of the brightest channel, per image."""
    return np.argmax(_channels(images).mean(axis=2), axis=1)
