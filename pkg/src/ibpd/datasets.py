"""Synthetic ECG beats, colored digits, IDX ingestion and subject-disjoint splits."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

COLOR_NAMES = ("white", "red", "green", "blue")
NO_SUBJECT = -1
NO_COLOR = -1


@dataclass
class LabeledExample:
    x: np.ndarray
    task_label: int
    subject_id: int
    artifact_flag: bool
    color_id: int | None = None


@dataclass
class Dataset:
    """Column-oriented collection of labelled examples."""

    x: np.ndarray
    task_label: np.ndarray
    subject_id: np.ndarray
    artifact_flag: np.ndarray
    color_id: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        n = self.x.shape[0]
        self.task_label = np.asarray(self.task_label, dtype=np.int64)
        self.subject_id = np.asarray(self.subject_id, dtype=np.int64)
        self.artifact_flag = np.asarray(self.artifact_flag, dtype=bool)
        self.color_id = np.asarray(self.color_id, dtype=np.int64)
        for name in ("task_label", "subject_id", "artifact_flag", "color_id"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("inputs must be finite")

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        color = int(self.color_id[i])
        return LabeledExample(
            x=self.x[i],
            task_label=int(self.task_label[i]),
            subject_id=int(self.subject_id[i]),
            artifact_flag=bool(self.artifact_flag[i]),
            color_id=None if color == NO_COLOR else color,
        )

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(
            self.x[idx], self.task_label[idx], self.subject_id[idx], self.artifact_flag[idx], self.color_id[idx], dict(self.meta)
        )

    @classmethod
    def concatenate(cls, parts: list[Dataset]) -> Dataset:
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.task_label for p in parts]),
            np.concatenate([p.subject_id for p in parts]),
            np.concatenate([p.artifact_flag for p in parts]),
            np.concatenate([p.color_id for p in parts]),
            dict(parts[0].meta),
        )


# ---------------------------------------------------------------------------
# synthetic ECG
# ---------------------------------------------------------------------------


@dataclass
class SynthEcgConfig:
    n_subjects: int = 10
    beats_per_subject: int = 400
    n_leads: int = 12
    samples_per_lead: int = 100
    task_classes: int = 10
    artifact_width: int = 10
    artifact_fraction: float = 0.5
    artifact_amplitude: float = 1.5
    artifact_position: str = "prepend"
    subject_morphology_scale: float = 0.3
    noise_std: float = 0.1
    beat_jitter: float = 0.02
    beat_amplitude_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_subjects, self.beats_per_subject, self.n_leads, self.samples_per_lead, self.task_classes)
        if min(counts) < 1 or self.artifact_width < 0:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.artifact_fraction <= 1.0:
            raise ValueError("artifact_fraction must lie in [0, 1]")
        if self.artifact_position not in ("prepend", "append"):
            raise ValueError("artifact_position must be 'prepend' or 'append'")

    @property
    def lead_length(self) -> int:
        return self.artifact_width + self.samples_per_lead

    @property
    def input_dim(self) -> int:
        return self.n_leads * self.lead_length

    def artifact_region(self) -> np.ndarray:
        """Flat indices of the stimulus block in every lead."""
        start = 0 if self.artifact_position == "prepend" else self.samples_per_lead
        offsets = np.arange(start, start + self.artifact_width)
        return (np.arange(self.n_leads)[:, None] * self.lead_length + offsets[None, :]).ravel()


def _bump(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def synth_ecg_generate(cfg: SynthEcgConfig) -> Dataset:
    """Beats whose shape is set by the task class and distorted per subject.

    Each class fixes a depolarisation bump (timing, width, per-lead polarity and
    amplitude).  Each subject mixes the leads, rescales and offsets them,
    shifts and widens the bump and adds a repolarisation bump of its own; all
    of these scale with ``subject_morphology_scale``.  Beats add amplitude and
    timing jitter plus white noise.  Independently, a fraction of beats carries
    a rectangular stimulus block in the artifact window; the rest get zeros
    there.  Separate random streams keep beats identical across different
    ``artifact_fraction`` settings.
    """
    tmpl_rng, subj_rng, beat_rng, art_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    L, T, S = cfg.n_leads, cfg.task_classes, cfg.n_subjects
    t = np.linspace(0.0, 1.0, cfg.samples_per_lead)
    s = cfg.subject_morphology_scale

    cls_center = tmpl_rng.uniform(0.3, 0.6, T)
    cls_width = tmpl_rng.uniform(0.03, 0.07, T)
    cls_delay = tmpl_rng.uniform(-0.06, 0.06, (T, L))
    cls_sign = tmpl_rng.choice([-1.0, 1.0], (T, L))
    cls_amp = tmpl_rng.uniform(0.5, 1.0, (T, L))
    peak = float(cls_amp.max())

    gain = np.exp(s / 3 * subj_rng.standard_normal((S, L)))
    offset = s / 6 * subj_rng.standard_normal((S, L))
    shift = 0.27 * s * subj_rng.standard_normal(S)
    rep_center = subj_rng.uniform(0.7, 0.9, S)
    rep_amp = 5 * s / 3 * subj_rng.standard_normal((S, L))
    widen = np.exp(s * subj_rng.standard_normal(S))
    mixing = s * subj_rng.standard_normal((S, L, L)) / np.sqrt(L)

    n = S * cfg.beats_per_subject
    subject = np.repeat(np.arange(S), cfg.beats_per_subject)
    label = beat_rng.integers(0, T, n)
    jitter = cfg.beat_jitter * beat_rng.standard_normal(n)
    beat_gain = np.exp(cfg.beat_amplitude_jitter * beat_rng.standard_normal(n))
    noise = cfg.noise_std * beat_rng.standard_normal((n, L, cfg.samples_per_lead))

    centers = cls_center[label][:, None] + cls_delay[label] + (shift[subject] + jitter)[:, None]
    widths = (cls_width[label] * widen[subject])[:, None, None]
    qrs = cls_sign[label][..., None] * cls_amp[label][..., None] * _bump(t[None, None, :], centers[..., None], widths)
    qrs = qrs + np.einsum("nlm,nmp->nlp", mixing[subject], qrs)
    rep = rep_amp[subject][..., None] * _bump(t[None, None, :], rep_center[subject][:, None, None], 0.06)
    signal = (beat_gain[:, None] * gain[subject])[..., None] * qrs + offset[subject][..., None] + rep + noise

    flags = art_rng.uniform(size=n) < cfg.artifact_fraction
    block = np.zeros((n, L, cfg.artifact_width))
    block[flags] = cfg.artifact_amplitude * peak
    parts = [block, signal] if cfg.artifact_position == "prepend" else [signal, block]
    x = np.concatenate(parts, axis=2).reshape(n, cfg.input_dim)
    return Dataset(x, label, subject, flags, np.full(n, NO_COLOR), meta={"preset": "synth-ecg", "config": asdict(cfg)})


# ---------------------------------------------------------------------------
# colored digits
# ---------------------------------------------------------------------------


@dataclass
class ColorizeConfig:
    white_prob: float = 0.25
    seed: int = 0


def colorize_digits(images, labels, cfg: ColorizeConfig | None = None) -> Dataset:
    """Place each grayscale digit into one RGB channel, or all three for white.

    Output rows are channel-major [3, 28, 28] flattened to 2352 values.
    """
    cfg = cfg or ColorizeConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError("images must have shape [n, H, W]")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    colored_prob = (1.0 - cfg.white_prob) / 3.0
    color = rng.choice(4, size=n, p=[cfg.white_prob, colored_prob, colored_prob, colored_prob])
    channels = np.zeros((n, 3) + images.shape[1:])
    white = color == 0
    channels[white] = images[white][:, None]
    for c in (1, 2, 3):
        sel = color == c
        channels[sel, c - 1] = images[sel]
    return Dataset(
        channels.reshape(n, -1),
        labels,
        np.full(n, NO_SUBJECT),
        color != 0,
        color,
        meta={"preset": "colored-digits", "colorize": asdict(cfg)},
    )


# strokes in a unit box (x to the right, y downwards)
def _ellipse(cx, cy, rx, ry, start=0.0, stop=2 * np.pi, n=18):
    a = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


_GLYPHS = {
    0: [_ellipse(0.5, 0.5, 0.22, 0.36)],
    1: [np.array([[0.35, 0.25], [0.52, 0.1], [0.52, 0.9]])],
    2: [np.array([[0.25, 0.3], [0.35, 0.15], [0.6, 0.12], [0.72, 0.28], [0.65, 0.45], [0.25, 0.88], [0.78, 0.88]])],
    3: [np.array([[0.25, 0.15], [0.7, 0.15], [0.45, 0.45], [0.7, 0.6], [0.65, 0.82], [0.4, 0.9], [0.22, 0.8]])],
    4: [np.array([[0.65, 0.9], [0.65, 0.1], [0.2, 0.65], [0.8, 0.65]])],
    5: [np.array([[0.75, 0.12], [0.3, 0.12], [0.27, 0.45], [0.55, 0.4], [0.72, 0.55], [0.68, 0.8], [0.45, 0.9], [0.25, 0.82]])],
    6: [np.array([[0.68, 0.15], [0.4, 0.3], [0.28, 0.6], [0.35, 0.85], [0.6, 0.88], [0.72, 0.68], [0.55, 0.52], [0.3, 0.6]])],
    7: [np.array([[0.22, 0.12], [0.78, 0.12], [0.45, 0.9]])],
    8: [_ellipse(0.5, 0.3, 0.18, 0.17), _ellipse(0.5, 0.69, 0.22, 0.2)],
    9: [_ellipse(0.5, 0.33, 0.2, 0.18), np.array([[0.7, 0.35], [0.62, 0.9]])],
}


def _segments(polylines) -> np.ndarray:
    return np.concatenate([np.stack([p[:-1], p[1:]], axis=1) for p in polylines])


def synthetic_glyphs(n: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Stroke-rendered digits 0-9 with random slant, scale, shift and thickness."""
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size
    px = np.stack(np.meshgrid(coords, coords), axis=-1).reshape(-1, 2)
    labels = rng.integers(0, 10, n)
    images = np.empty((n, size, size))
    for i, digit in enumerate(labels):
        seg = _segments(_GLYPHS[int(digit)]) - 0.5
        shear = rng.uniform(-0.3, 0.3)
        s = rng.uniform(0.75, 1.05, 2)
        angle = rng.uniform(-0.15, 0.15)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        affine = rot @ np.array([[s[0], shear], [0.0, s[1]]])
        seg = seg @ affine.T + 0.5 + rng.uniform(-0.07, 0.07, 2)
        seg = seg + rng.normal(0.0, 0.015, seg.shape)
        a, b = seg[:, 0], seg[:, 1]
        ab = b - a
        rel = px[:, None, :] - a[None]
        u = np.clip(np.sum(rel * ab[None], axis=2) / np.maximum(np.sum(ab * ab, axis=1), 1e-12)[None], 0.0, 1.0)
        dist = np.linalg.norm(rel - u[..., None] * ab[None], axis=2).min(axis=1)
        thick = rng.uniform(0.035, 0.075)
        images[i] = np.clip(1.0 - (dist - thick) / 0.03, 0.0, 1.0).reshape(size, size)
    return images, labels


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_IDX_ITEMS = 2**31


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


def idx_read(path) -> np.ndarray:
    """Decode an unsigned-byte IDX file.

    Image files (magic 0x803) come back as float64 scaled to [0, 1]; label
    files (magic 0x801) as int64.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IdxTruncatedError("file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxMagicError(f"unexpected IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxTruncatedError("IDX dimension table is truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_IDX_ITEMS:
        raise IdxDimensionError(f"IDX dimensions {dims} overflow")
    payload = buf[header:]
    if len(payload) < count:
        raise IdxTruncatedError(f"IDX payload has {len(payload)} bytes, expected {count}")
    if len(payload) > count:
        raise IdxFormatError(f"IDX payload has {len(payload) - count} trailing bytes")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if magic == IDX_IMAGES:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def idx_write(path, array) -> None:
    array = np.asarray(array)
    if array.ndim not in (1, 3) or array.dtype != np.uint8:
        raise ValueError("IDX writer supports uint8 arrays of rank 1 (labels) or 3 (images)")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    return idx_read(d / f"{prefix}-images-idx3-ubyte"), idx_read(d / f"{prefix}-labels-idx1-ubyte")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitSet:
    train: Dataset
    validation: Dataset
    test: Dataset
    by_subject: bool = True


def split_by_subject(data: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSet:
    """Partition subjects (not beats) into train/validation/test.

    Data without subject ids (all -1) falls back to an example-level split and
    the result is flagged with ``by_subject=False``.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    if np.all(data.subject_id == NO_SUBJECT):
        units = rng.permutation(len(data))
        by_subject = False
    else:
        units = rng.permutation(np.unique(data.subject_id))
        by_subject = True
    if len(units) < 3:
        raise ValueError(f"need at least 3 subjects to split, got {len(units)}")
    n_train = max(1, int(round(fractions[0] * len(units))))
    n_val = max(1, int(round(fractions[1] * len(units))))
    n_train = min(n_train, len(units) - 2)
    n_val = min(n_val, len(units) - n_train - 1)
    groups = np.split(units, [n_train, n_train + n_val])
    if by_subject:
        parts = [np.flatnonzero(np.isin(data.subject_id, g)) for g in groups]
    else:
        parts = [np.sort(g) for g in groups]
    return SplitSet(*(data.subset(p) for p in parts), by_subject=by_subject)


# ---------------------------------------------------------------------------
# dataset container
#
#   magic "IBPDDATA" | u32 version | u32 len + JSON header | u64 n | u32 dim
#   per example: i32 task_label | i32 subject_id | u8 artifact_flag | i8 color_id | f64 LE x[dim]
#   u32 CRC-32 of everything before it
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"IBPDDATA"
DATASET_VERSION = 1
_RECORD_HEAD = np.dtype([("task", "<i4"), ("subject", "<i4"), ("artifact", "u1"), ("color", "i1")])


class DatasetFormatError(ValueError):
    pass


def dataset_bytes(data: Dataset) -> bytes:
    header = json.dumps(data.meta, sort_keys=True, separators=(",", ":")).encode()
    n, dim = data.x.shape
    rec = np.dtype(_RECORD_HEAD.descr + [("x", "<f8", (dim,))])
    table = np.zeros(n, dtype=rec)
    table["task"] = data.task_label
    table["subject"] = data.subject_id
    table["artifact"] = data.artifact_flag
    table["color"] = data.color_id
    table["x"] = data.x
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<II", DATASET_VERSION, len(header)) + header
    out += struct.pack("<QI", n, dim) + table.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(data))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset container (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        pos = 16 + hlen
        meta = json.loads(buf[16:pos])
        n, dim = struct.unpack_from("<QI", buf, pos)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError("dataset header is truncated or corrupt") from exc
    pos += 12
    rec = np.dtype(_RECORD_HEAD.descr + [("x", "<f8", (dim,))])
    end = pos + n * rec.itemsize
    if len(buf) != end + 4:
        raise DatasetFormatError("dataset payload is truncated or has trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != zlib.crc32(buf[:end]):
        raise DatasetFormatError("dataset checksum mismatch")
    table = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    return Dataset(table["x"].copy(), table["task"], table["subject"], table["artifact"].astype(bool), table["color"], meta)
