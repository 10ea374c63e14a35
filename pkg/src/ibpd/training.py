"""Optimisation loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Classifier, ModelConfig, Noise, build_model
from .tensor import NonFiniteError, Parameter, backward, no_grad

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "epoch",
    "recon",
    "kl_sticks",
    "kl_z",
    "kl_a",
    "ce",
    "total",
    "val_accuracy",
    "val_neg_elbo",
    "val_active_mean",
    "clip_events",
)


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``last_good`` holds the parameter values from before the failing step and
    ``report`` the epochs completed so far.
    """

    def __init__(self, message: str, last_good: dict | None = None, report: TrainReport | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.report = report


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    zeta: float | None = None
    temperature_schedule: str = "constant"
    temperature_min: float = 0.1
    anneal_rate: float = 0.0
    clip_norm: float = 10.0
    clip_mode: str = "per_group"
    selection: str = "best_val_accuracy"
    eval_seed: int = 0
    straight_through: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.temperature_schedule not in ("constant", "anneal"):
            raise ValueError("temperature_schedule must be 'constant' or 'anneal'")
        if self.clip_mode not in ("per_group", "global"):
            raise ValueError("clip_mode must be 'per_group' or 'global'")
        if self.selection not in ("best_val_accuracy", "last"):
            raise ValueError("selection must be 'best_val_accuracy' or 'last'")


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    kl_sticks: float
    kl_z: float
    kl_a: float
    ce: float
    total: float
    val_accuracy: float
    val_neg_elbo: float
    val_active_mean: float
    clip_events: int


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    selected_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for rec in self.epochs:
            writer.writerow([_fmt(getattr(rec, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        best = self.epochs[self.selected_epoch - 1] if self.epochs else None
        return {
            "train_config": self.config,
            "epochs_completed": len(self.epochs),
            "selected_epoch": self.selected_epoch,
            "selected": asdict(best) if best else None,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class EvalMetrics:
    accuracy: float
    neg_elbo: float
    active_mean: float


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{p.name}'")
            st = self.state.setdefault(p.name, {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(params: list[Parameter], max_norm: float, mode: str = "per_group") -> int:
    """Rescale gradients whose L2 norm exceeds ``max_norm``; returns how many groups were clipped.

    ``per_group`` treats each top-level sub-network (first path component of
    the parameter name) separately; ``global`` uses one norm for everything.
    """
    groups: dict[str, list[Parameter]] = {}
    for p in params:
        if p.grad is not None:
            key = p.name.split("/")[0] if mode == "per_group" else ""
            groups.setdefault(key, []).append(p)
    clipped = 0
    for members in groups.values():
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in members))
        if norm > max_norm:
            clipped += 1
            scale = max_norm / norm
            for p in members:
                p.grad = p.grad * scale
    return clipped


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


def _restore(model, values: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters().items():
        p.data[...] = values[name]


def _temperature(model_cfg: ModelConfig, cfg: TrainConfig, epoch: int) -> float:
    if cfg.temperature_schedule == "constant":
        return model_cfg.temperature
    return max(cfg.temperature_min, model_cfg.temperature * math.exp(-cfg.anneal_rate * epoch))


def evaluate(model, x: np.ndarray, labels: np.ndarray, seed: int = 0, batch_size: int = 512) -> EvalMetrics:
    """Accuracy, mean negative ELBO and mean active-feature count with hard latents."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    correct = 0
    neg_elbo = 0.0
    active = 0.0
    generative = hasattr(model, "sample_latent")
    with no_grad():
        for lo in range(0, n, batch_size):
            xb, yb = x[lo : lo + batch_size], labels[lo : lo + batch_size]
            if generative:
                noise = Noise.draw(rng, xb.shape[0], model.cfg.K)
                enc = model.encode(xb)
                latent = model.sample_latent(enc, noise, hard=True)
                _, terms, _ = model._elbo_from(xb, yb, enc, latent, xb.shape[0] / n)
                neg_elbo += terms.elbo_loss
                if latent.Z is not None:
                    active += float(latent.Z.data.sum())
            else:
                enc = model.encode(xb)
            correct += int(np.sum(np.argmax(enc.task_logits.data, axis=1) == yb))
    return EvalMetrics(
        accuracy=correct / n,
        neg_elbo=neg_elbo / n if generative else float("nan"),
        active_mean=active / n if generative else float("nan"),
    )


def train(model, train_x, train_y, val_x, val_y, cfg: TrainConfig) -> tuple[object, TrainReport]:
    """Minibatch Adam on the supervised objective; deterministic given ``cfg.seed``.

    Shuffling and latent noise use separate generator streams so that the
    batch order does not depend on how much noise a model kind consumes.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if cfg.zeta is not None:
        model.cfg.zeta = cfg.zeta
    shuffle_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = model.parameters()
    n = train_x.shape[0]
    K = getattr(model.cfg, "K", 1)
    report = TrainReport(config=asdict(cfg))
    best_acc = -1.0
    best_params = _snapshot(model)
    last_good = best_params

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        if hasattr(model, "temperature"):
            model.temperature = _temperature(model.cfg, cfg, epoch - 1)
        sums = dict(recon=0.0, kl_sticks=0.0, kl_z=0.0, kl_a=0.0, ce=0.0, total=0.0)
        clip_events = 0
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            noise = Noise.draw(noise_rng, idx.shape[0], K)
            for p in params:
                p.grad = None
            try:
                loss, terms = model.supervised_loss(train_x[idx], train_y[idx], noise, n_total=n, hard=cfg.straight_through)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("non-finite loss")
                backward(loss)
                clip_events += clip_gradients(params, cfg.clip_norm, cfg.clip_mode)
                opt.step(params)
            except NonFiniteError as exc:
                _restore(model, last_good)
                raise TrainingAbort(f"epoch {epoch}: {exc}", last_good=last_good, report=report) from exc
            for key in sums:
                # the CE term is a batch mean; weight it back to a sum
                sums[key] += getattr(terms, key) * (idx.shape[0] if key == "ce" else 1.0)
        last_good = _snapshot(model)
        val = evaluate(model, val_x, val_y, seed=cfg.eval_seed)
        elapsed = time.perf_counter() - start
        rec = EpochRecord(
            epoch=epoch,
            **{k: v / n for k, v in sums.items()},
            val_accuracy=val.accuracy,
            val_neg_elbo=val.neg_elbo,
            val_active_mean=val.active_mean,
            clip_events=clip_events,
        )
        report.epochs.append(rec)
        report.wall_clock.append(elapsed)
        log.info("epoch %d loss %.4f val_acc %.4f active %.2f (%.1fs)", epoch, rec.total, val.accuracy, val.active_mean, elapsed)
        # ties go to the later epoch
        if cfg.selection == "last" or val.accuracy >= best_acc:
            best_acc = val.accuracy
            best_params = last_good
            report.selected_epoch = epoch

    _restore(model, best_params)
    return model, report


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic "IBPDCKPT" | u32 version | u32 len + JSON config | u32 n_params
#   per parameter: u16 len + utf-8 name | u8 ndim | u32 dims... | f64 LE payload
#   u32 CRC-32 of everything before it
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IBPDCKPT"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model, meta: dict | None = None) -> bytes:
    header = {"model": model.cfg.to_dict(), "meta": meta or {}}
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    blob = _canonical_json(header)
    out += struct.pack("<I", len(blob)) + blob
    params = model.parameters()
    out += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        out += p.data.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def _reader(buf: bytes):
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    return take, lambda: pos


def load_checkpoint(path, with_meta: bool = False):
    buf = Path(path).read_bytes()
    take, tell = _reader(buf)
    if take(8) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen))
    except ValueError as exc:
        raise CheckpointFormatError("corrupt checkpoint header") from exc
    model = build_model(ModelConfig.from_dict(header["model"]))
    named = model.named_parameters()
    (count,) = struct.unpack("<I", take(4))
    if count != len(named):
        raise CheckpointFormatError(f"checkpoint holds {count} parameters, model expects {len(named)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        if name not in named or named[name].shape != tuple(shape):
            raise CheckpointFormatError(f"unexpected parameter {name!r} with shape {shape}")
        named[name].data[...] = values
    body_end = tell()
    (crc,) = struct.unpack("<I", take(4))
    if tell() != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointFormatError("checkpoint checksum mismatch")
    return (model, header.get("meta", {})) if with_meta else model
