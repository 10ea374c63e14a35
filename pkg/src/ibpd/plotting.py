"""Dependency-free figure export: SVG line plots and binary PGM/PPM images."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _polyline_points(y: np.ndarray, x0: float, y0: float, width: float, height: float, lo: float, hi: float) -> str:
    n = y.size
    xs = x0 + (np.arange(n) * (width / max(n - 1, 1)))
    span = hi - lo
    ys = np.full(n, y0 + height / 2) if span == 0 else y0 + height - (y - lo) / span * height
    return " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(xs, ys))


def svg_lines(series, labels=None, title: str = "", width: int = 800, height: int = 300) -> str:
    """Render one or more 1-D series on shared axes as an SVG document."""
    series = [np.asarray(s, dtype=np.float64).ravel() for s in series]
    if not series:
        raise ValueError("nothing to plot")
    labels = list(labels) if labels is not None else [f"series {i}" for i in range(len(series))]
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    pad = 30
    pw, ph = width - 2 * pad, height - 2 * pad
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>',
    ]
    if title:
        out.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">{escape(title)}</text>')
    for i, (s, label) in enumerate(zip(series, labels)):
        color = PALETTE[i % len(PALETTE)]
        pts = _polyline_points(s, pad, pad, pw, ph, lo, hi)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        out.append(f'<text x="{pad + 5}" y="{pad + 14 * (i + 1)}" font-size="11" fill="{color}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_svg(series, path, labels=None, title: str = "") -> None:
    Path(path).write_text(svg_lines(series, labels, title))


def to_bytes(image) -> np.ndarray:
    """Map [0, 1] floats to uint8 with rounding; values outside are clipped."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def pnm_bytes(image) -> bytes:
    """Binary PGM (P5) for [h, w] arrays, PPM (P6) for [h, w, 3]; maxval 255."""
    img = to_bytes(image)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected [h, w] or [h, w, 3] image, got shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pnm(image, path) -> None:
    Path(path).write_bytes(pnm_bytes(image))


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 back into uint8."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError("only binary P5/P6 with maxval 255 are supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf[pos : pos + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise ValueError("truncated image payload")
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def flat_to_image(x, side: int = 28) -> np.ndarray:
    """Channel-major flat vector (3*side*side or side*side) to [h, w(, 3)]."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == side * side:
        return x.reshape(side, side)
    if x.size == 3 * side * side:
        return x.reshape(3, side, side).transpose(1, 2, 0)
    raise ValueError(f"cannot view {x.size} values as a {side}x{side} image")


def image_grid(images, rows: int, cols: int, side: int = 28, gap: int = 2) -> np.ndarray:
    """Tile rows*cols flat images into one array with ``gap`` black pixels between."""
    images = [flat_to_image(im, side) for im in images]
    if len(images) != rows * cols:
        raise ValueError(f"need {rows * cols} images, got {len(images)}")
    color = images[0].ndim == 3
    shape = (rows * (side + gap) - gap, cols * (side + gap) - gap) + ((3,) if color else ())
    grid = np.zeros(shape)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * (side + gap) : r * (side + gap) + side, c * (side + gap) : c * (side + gap) + side] = im
    return grid
