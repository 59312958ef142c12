"""Frame comparison and image output: windowed SSIM, PGM files, tile grids."""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _windows(img, window, stride):
    h, w = img.shape
    if h < window or w < window:
        raise ValueError(f"frame {img.shape} smaller than the {window}x{window} window")
    view = np.lib.stride_tricks.sliding_window_view(img, (window, window))
    return view[::stride, ::stride].reshape(-1, window * window)


def ssim(a, b, window: int = SSIM_WINDOW, stride: int = SSIM_STRIDE) -> float:
    """Mean SSIM over square windows with population statistics.

    Every term is built from commutative products, so ``ssim(a, b)`` and
    ``ssim(b, a)`` agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D frames")
    wa, wb = _windows(a, window, stride), _windows(b, window, stride)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    ma, mb = wa.mean(axis=1), wb.mean(axis=1)
    da, db = wa - ma[:, None], wb - mb[:, None]
    va, vb = (da * da).mean(axis=1), (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    num = (2 * ma * mb + c1) * (2 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def quantize(frames) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, frame) -> None:
    """Binary (P5) 8-bit greyscale image."""
    q = quantize(frame)
    if q.ndim != 2:
        raise ValueError("PGM frames must be 2-D")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return data.astype(np.float64) / maxval


def grid(frames, ncols: int | None = None, separator: float = 1.0) -> np.ndarray:
    """Row-major tiling with 1-px separators between tiles."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("grid needs at least one frame")
    h, w = frames[0].shape
    n = len(frames)
    ncols = ncols or math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    out = np.full((nrows * (h + 1) - 1, ncols * (w + 1) - 1), separator)
    for i, f in enumerate(frames):
        r, c = divmod(i, ncols)
        out[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = f
    return out
