"""Procedural moving-sprite sequences.

Each sequence holds one anti-aliased glyph (disc, ring or cross) that drifts
with a near-constant velocity and bounces off the frame borders. Sub-pixel
motion uses bilinear splatting, which conserves both the sprite mass and its
centroid. Frames are stored 8-bit quantised.

Dataset file layout (little-endian)::

    b"LCDS" | u16 version | u32 n_sequences | u32 frames_per_seq | u32 side
    per sequence: u32 sprite_id, f64[frames_per_seq - 1, 2] trajectory (dx, dy)
    frames: u8[n_sequences, frames_per_seq, side, side]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import quantize, read_pgm, write_pgm  # noqa: F401
from .rng import RandomState

MAGIC = b"LCDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
N_SPRITE_IDS = 1000
KINDS = ("disc", "ring", "cross")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_sequences: int = 2000
    frames_per_seq: int = 30
    image_side: int = 32
    sprite_px_range: tuple[float, float] = (18.0, 25.0)
    v_max: float = 1.0
    seed: int = 0


@dataclass(eq=False)
class Sequence:
    """One sprite trajectory; ``pixels`` is the quantised uint8 stack."""

    pixels: np.ndarray
    sprite_id: int
    trajectory: np.ndarray

    @property
    def frames(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def frame(self, i: int) -> np.ndarray:
        return self.pixels[i].astype(np.float64) / 255.0

    def __len__(self):
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# sprites
# ---------------------------------------------------------------------------


def sprite_params(sprite_id: int, side: int = 32, px_range=(18.0, 25.0)) -> dict:
    """Shape parameters derived from the sprite id alone."""
    rs = RandomState(sprite_id, (7,))
    scale = side / 32.0
    lo, hi = px_range
    return {
        "kind": KINDS[sprite_id % len(KINDS)],
        "size": float(rs.uniform(low=lo, high=hi)) * scale,
        "thickness": float(rs.uniform(low=0.18, high=0.3)),
        "arm": float(rs.uniform(low=0.22, high=0.35)),
    }


def render_sprite(params: dict, supersample: int = 4) -> np.ndarray:
    """Anti-aliased glyph on a square patch one pixel wider than its size."""
    size = params["size"]
    n = int(math.ceil(size)) + 1
    k = supersample
    coords = (np.arange(n * k) + 0.5) / k - n / 2.0
    X, Y = np.meshgrid(coords, coords, indexing="xy")
    R = np.hypot(X, Y)
    half = size / 2.0
    kind = params["kind"]
    if kind == "disc":
        mask = R <= half
    elif kind == "ring":
        mask = (R <= half) & (R >= half * (1.0 - 2.0 * params["thickness"]))
    else:
        arm = half * params["arm"]
        mask = ((np.abs(X) <= arm) & (np.abs(Y) <= half)) | ((np.abs(Y) <= arm) & (np.abs(X) <= half))
    return mask.reshape(n, k, n, k).mean(axis=(1, 3))


def place(patch: np.ndarray, side: int, x: float, y: float) -> np.ndarray:
    """Bilinear splat of ``patch`` with its top-left corner at ``(x, y)``."""
    n = patch.shape[0]
    ix, iy = int(math.floor(x)), int(math.floor(y))
    fx, fy = x - ix, y - iy
    padded = np.zeros((n + 1, n + 1))
    padded[:n, :n] += (1 - fx) * (1 - fy) * patch
    padded[:n, 1:] += fx * (1 - fy) * patch
    padded[1:, :n] += (1 - fx) * fy * patch
    padded[1:, 1:] += fx * fy * patch
    frame = np.zeros((side, side))
    frame[iy : iy + n + 1, ix : ix + n + 1] = padded
    return np.clip(frame, 0.0, 1.0)


def _bounce(p, v, hi):
    p = p + v
    if hi <= 0:
        return 0.0, v
    if p < 0:
        p, v = -p, -v
    elif p > hi:
        p, v = 2 * hi - p, -v
    return min(max(p, 0.0), hi), v


def generate_sequence(cfg: DataConfig, rng: RandomState) -> Sequence:
    side = cfg.image_side
    sprite_id = int(rng.integers(0, N_SPRITE_IDS))
    params = sprite_params(sprite_id, side, cfg.sprite_px_range)
    patch = render_sprite(params)
    hi = side - patch.shape[0] - 1
    if hi < 0:
        raise ValueError(f"sprite of {params['size']:.1f}px does not fit a {side}px frame")
    pos = rng.uniform(size=2) * hi
    angle = float(rng.uniform(high=2 * math.pi))
    speed = cfg.v_max * float(rng.uniform(low=0.5, high=0.9))
    base = np.array([speed * math.cos(angle), speed * math.sin(angle)])
    frames = [place(patch, side, pos[0], pos[1])]
    traj = np.zeros((cfg.frames_per_seq - 1, 2))
    for k in range(cfg.frames_per_seq - 1):
        # jitter magnitude <= 0.05 * sqrt(2) * v_max < 0.1 * v_max
        step = base + rng.uniform(size=2, low=-0.05, high=0.05) * cfg.v_max
        new = pos.copy()
        for a in range(2):
            new[a], v = _bounce(pos[a], step[a], hi)
            if v != step[a]:
                base[a] = -base[a]
        traj[k] = new - pos
        pos = new
        frames.append(place(patch, side, pos[0], pos[1]))
    return Sequence(quantize(np.stack(frames)), sprite_id, traj)


def generate(cfg: DataConfig) -> list[Sequence]:
    """Deterministic dataset; sequence ``i`` uses the stream ``(seed, i)``."""
    root = RandomState(cfg.seed)
    return [generate_sequence(cfg, root.spawn(i)) for i in range(cfg.n_sequences)]


def all_frames(dataset: list[Sequence]) -> np.ndarray:
    """Every frame as a ``(N, side * side)`` uint8 matrix, sequence-major."""
    return np.concatenate([s.pixels.reshape(len(s), -1) for s in dataset], axis=0)


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def header_size(n_sequences: int, frames_per_seq: int) -> int:
    return _HEADER.size + n_sequences * (4 + 16 * (frames_per_seq - 1))


def save(dataset: list[Sequence], path) -> None:
    if not dataset:
        raise ValueError("cannot save an empty dataset")
    n_frames, side = dataset[0].pixels.shape[0], dataset[0].pixels.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset), n_frames, side))
        for s in dataset:
            if s.pixels.shape != (n_frames, side, side):
                raise ValueError("all sequences must share frame count and size")
            fh.write(struct.pack("<I", s.sprite_id))
            fh.write(np.ascontiguousarray(s.trajectory, dtype="<f8").tobytes())
        for s in dataset:
            fh.write(np.ascontiguousarray(s.pixels, dtype=np.uint8).tobytes())


def load(path) -> list[Sequence]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file is truncated")
    magic, version, n_seq, n_frames, side = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}; not a dataset file")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    expected = header_size(n_seq, n_frames) + n_seq * n_frames * side * side
    if len(raw) != expected:
        raise DatasetFormatError(f"file has {len(raw)} bytes, expected {expected}")
    off = _HEADER.size
    meta = []
    for _ in range(n_seq):
        (sid,) = struct.unpack_from("<I", raw, off)
        off += 4
        traj = np.frombuffer(raw, dtype="<f8", count=2 * (n_frames - 1), offset=off).reshape(-1, 2).astype(np.float64)
        off += 16 * (n_frames - 1)
        meta.append((sid, traj))
    pix = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(n_seq, n_frames, side, side)
    return [Sequence(pix[i].copy(), sid, traj) for i, (sid, traj) in enumerate(meta)]


# ---------------------------------------------------------------------------
# counter-examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NegativePair:
    seq_a: int
    frame_a: int
    seq_b: int
    frame_b: int

    @property
    def gap(self) -> int:
        return self.frame_b - self.frame_a


def negatives(dataset: list[Sequence], rng: RandomState, n: int, min_gap: int = 10) -> list[NegativePair]:
    """Frame pairs that do not belong to one continuous trajectory.

    Pairs come from two different sequences with the second frame strictly
    later; with a single sequence they come from frames at least ``min_gap``
    apart. Every pair is ordered so that ``gap >= 1``.
    """
    if n == 0:
        return []
    if not dataset:
        raise ValueError("dataset too small for counter-examples")
    f = len(dataset[0])
    pairs = []
    if len(dataset) >= 2 and f >= 2:
        for _ in range(n):
            a = int(rng.integers(0, len(dataset)))
            b = int(rng.integers(0, len(dataset) - 1))
            b += b >= a
            i = int(rng.integers(0, f - 1))
            j = int(rng.integers(i + 1, f))
            pairs.append(NegativePair(a, i, b, j))
    elif f > min_gap:
        for _ in range(n):
            i = int(rng.integers(0, f - min_gap))
            j = int(rng.integers(i + min_gap, f))
            pairs.append(NegativePair(0, i, 0, j))
    else:
        raise ValueError("dataset too small for counter-examples")
    return pairs
