"""Run configuration read from flat ``key = value`` text files.

Blank lines and ``#`` comments are ignored. Every key must be a field of
:class:`RunConfig`; values are converted to the field's type. Unknown keys,
unparsable values and missing input paths raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

FULL_SCALE_SEQUENCES = 10_000
FULL_SCALE_SAMPLES = 100_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    out: str = "out"
    seed: int = 0
    dataset: str = ""
    checkpoint: str = ""

    # synthetic data
    n_sequences: int = 2000
    frames_per_seq: int = 30
    image_side: int = 32
    sprite_px_min: float = 18.0
    sprite_px_max: float = 25.0
    v_max: float = 1.0

    # model and training
    latent_n: int = 8
    hidden: int = 600
    curvature: float = 1.0
    lr: float = 5e-4
    epochs: int = 20
    batch_size: int = 128
    kl_samples: int = 1
    eval_kl_samples: int = 64
    checkpoint_every: int = 0
    max_steps: int = 0
    resume: bool = False

    # space-time embedding and cones
    slope: str = "1.0"
    embedding: str = "lorentz"
    rho: float = 1.0
    dt: float = 1.0

    # single-cone synthesis
    times: str = "2,10,20"
    samples: int = 10_000
    grid_size: int = 16

    # intersecting-cone prediction
    sequence: int = 0
    prefix: int = 2
    horizon: float = 10.0
    k: int = 2
    trials: int = 5000
    candidates: int = 16
    branches: int = 3
    proposal: str = "apex"
    proposal_sigma: float = 0.5

    # counterfactual probing
    frame: int = 0
    direction: str = "future"
    probe_horizon: float = 2.0
    probe_k: int = 8

    # aperture estimation
    aperture_sequences: int = 200
    aperture_negatives: int = 2000

    def __post_init__(self):
        positive = ("frames_per_seq", "image_side", "latent_n", "hidden", "batch_size", "kl_samples",
                    "eval_kl_samples", "samples", "grid_size", "k", "trials", "branches", "probe_k",
                    "aperture_sequences", "prefix")  # fmt: skip
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("curvature", "lr", "rho", "dt", "proposal_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be finite and positive")
        if self.v_max < 0 or self.probe_horizon < 0:
            raise ConfigError("v_max and probe_horizon must be non-negative")
        if self.embedding not in ("lorentz", "ball"):
            raise ConfigError(f"embedding must be 'lorentz' or 'ball', got {self.embedding!r}")
        if self.direction not in ("future", "past"):
            raise ConfigError(f"direction must be 'future' or 'past', got {self.direction!r}")
        if self.proposal not in ("apex", "prior"):
            raise ConfigError(f"proposal must be 'apex' or 'prior', got {self.proposal!r}")
        if self.slope != "estimate":
            try:
                s = float(self.slope)
            except ValueError:
                raise ConfigError(f"slope must be a number or 'estimate', got {self.slope!r}") from None
            if not (math.isfinite(s) and s > 0):
                raise ConfigError("slope must be finite and positive")
        try:
            self.time_list()
        except ValueError:
            raise ConfigError(f"times must be a comma-separated list of numbers, got {self.times!r}") from None
        if self.sequence < 0 or self.frame < 0 or self.candidates < 0 or self.max_steps < 0:
            raise ConfigError("sequence, frame, candidates and max_steps must be non-negative")

    def time_list(self) -> list[float]:
        ts = [float(t) for t in self.times.split(",") if t.strip()]
        if not ts:
            raise ValueError("empty time list")
        return ts

    def fixed_slope(self) -> float | None:
        return None if self.slope == "estimate" else float(self.slope)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse(text: str, source: str = "<config>") -> dict:
    values = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, types[key], value)
    return values


def load(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse(p.read_text(), str(p))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def full_scale(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(cfg, n_sequences=FULL_SCALE_SEQUENCES, samples=FULL_SCALE_SAMPLES)


def require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is not set")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


def dump(cfg: RunConfig) -> str:
    """Config text that :func:`load` reads back to an equal config."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
