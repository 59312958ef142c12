"""Minkowski space-time and Poincare-ball geometry.

Two layers live here. The array functions (``mobius_add``, ``expmap``,
``dist`` ...) operate on the last axis of numpy arrays and are what the
samplers and the model use in bulk. The typed operations (``Event``,
``PoincarePoint``, ``minkowski_inner``, ``exp_map`` ...) validate their
inputs and delegate to the array layer.

Tangent vectors are expressed in unit-speed coordinates: a tangent vector
``u`` at ``x`` moves a geodesic distance of exactly ``|u|``, so
``exp_map(x, u) = x (+) tanh(sqrt(c)|u|/2) u / (sqrt(c)|u|)`` with ``(+)``
Mobius addition, and ``|log_map(x, y)| = d(x, y)``. The Euclidean-coordinate
convention found elsewhere differs by the conformal factor ``lambda_x``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

# c * |v|^2 is kept at or below this bound
BALL_EPS = 1e-12
MIN_NORM = 1e-15


class DimensionMismatch(ValueError):
    pass


class CurvatureMismatch(ValueError):
    pass


class NonTimelikeSegment(ValueError):
    """A path segment is spacelike, so its proper time is not real."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Event:
    """A space-time point: time ``t`` plus ``n`` spatial coordinates."""

    t: float
    x: np.ndarray

    def __post_init__(self):
        x = _frozen(self.x)
        if x.size < 1:
            raise ValueError("an event needs at least one spatial coordinate")
        if not (math.isfinite(self.t) and np.all(np.isfinite(x))):
            raise ValueError("event coordinates must be finite")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", x)

    @property
    def dim(self) -> int:
        return self.x.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.t], self.x])

    def __sub__(self, other: "Event") -> "Event":
        _check_dims(self, other)
        return Event(self.t - other.t, self.x - other.x)

    def __add__(self, other: "Event") -> "Event":
        _check_dims(self, other)
        return Event(self.t + other.t, self.x + other.x)

    def __repr__(self):
        return f"Event(t={self.t!r}, x={self.x.tolist()!r})"


class IntervalClass(enum.Enum):
    TIMELIKE = "timelike"
    SPACELIKE = "spacelike"
    LIGHTLIKE = "lightlike"


@dataclass(frozen=True, eq=False)
class PoincarePoint:
    """A point strictly inside the ball of radius ``1/sqrt(c)``.

    ``saturated`` marks points that were clamped back inside the ball by a
    numerical guard rather than produced exactly.
    """

    v: np.ndarray
    c: float = 1.0
    saturated: bool = False

    def __post_init__(self):
        v = _frozen(self.v)
        if not self.c > 0:
            raise ValueError(f"curvature must be positive, got {self.c}")
        if not np.all(np.isfinite(v)):
            raise ValueError("ball coordinates must be finite")
        if self.c * float(v @ v) >= 1.0:
            raise ValueError("point lies on or outside the ball boundary")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self) -> int:
        return self.v.size

    def __repr__(self):
        return f"PoincarePoint(v={self.v.tolist()!r}, c={self.c!r})"


@dataclass(frozen=True, eq=False)
class LorentzPoint:
    """A point on the upper sheet of the unit hyperboloid ``<w,w> = -1``."""

    w: np.ndarray

    def __post_init__(self):
        w = _frozen(self.w)
        if w.size < 2:
            raise ValueError("hyperboloid points need n + 1 >= 2 coordinates")
        q = -w[0] ** 2 + float(w[1:] @ w[1:])
        # rounding grows with w0^2 far from the apex
        if abs(q + 1.0) > 1e-9 * (1.0 + w[0] ** 2) or w[0] <= 0:
            raise ValueError("point is not on the upper hyperboloid sheet")
        object.__setattr__(self, "w", w)

    def __repr__(self):
        return f"LorentzPoint(w={self.w.tolist()!r})"


@dataclass(frozen=True, eq=False)
class TangentVector:
    u: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        u = _frozen(self.u)
        if not np.all(np.isfinite(u)):
            raise ValueError("tangent vector must be finite")
        object.__setattr__(self, "u", u)

    def __repr__(self):
        return f"TangentVector(u={self.u.tolist()!r})"


# ---------------------------------------------------------------------------
# array layer (last axis is the vector axis)
# ---------------------------------------------------------------------------


def _sq(x, keepdims=True):
    return np.sum(x * x, axis=-1, keepdims=keepdims)


def _dot(x, y, keepdims=True):
    return np.sum(x * y, axis=-1, keepdims=keepdims)


def arccosh1p(a):
    """``arccosh(1 + a)`` without the cancellation near ``a = 0``."""
    a = np.maximum(a, 0.0)
    return np.log1p(a + np.sqrt(a * (a + 2.0)))


def minkowski_dot(a, b):
    """``-a0 b0 + sum_i ai bi`` along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], axis=-1)


def lambda_c(x, c=1.0):
    """Conformal factor ``2 / (1 - c|x|^2)``, keeping the last axis."""
    return 2.0 / (1.0 - c * _sq(x))


def clip_to_ball(x, c=1.0):
    """Clamp rows to ``c|x|^2 <= 1 - BALL_EPS``; returns ``(x, saturated)``."""
    x = np.asarray(x, dtype=np.float64)
    max_norm = math.sqrt((1.0 - BALL_EPS) / c)
    norm = np.sqrt(_sq(x))
    saturated = norm > max_norm
    if np.any(saturated):
        x = np.where(saturated, x / np.maximum(norm, MIN_NORM) * max_norm, x)
    return x, saturated[..., 0]


def mobius_add(x, y, c=1.0):
    xy = _dot(x, y)
    x2 = _sq(x)
    y2 = _sq(y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return num / den


def expmap0(u, c=1.0):
    u = np.asarray(u, dtype=np.float64)
    sc = math.sqrt(c)
    norm = np.sqrt(_sq(u))
    safe = np.maximum(norm, MIN_NORM)
    scale = np.where(norm > 1e-8, np.tanh(sc * safe / 2.0) / (sc * safe), 0.5 - c * norm**2 / 24.0)
    return scale * u


def logmap0(y, c=1.0):
    y = np.asarray(y, dtype=np.float64)
    sc = math.sqrt(c)
    norm = np.sqrt(_sq(y))
    safe = np.maximum(norm, MIN_NORM)
    arg = np.minimum(sc * safe, 1.0 - 1e-16)
    scale = np.where(norm > 1e-8, 2.0 * np.arctanh(arg) / (sc * safe), 2.0 + 2.0 * c * norm**2 / 3.0)
    return scale * y


def expmap(x, u, c=1.0):
    """Unit-speed exponential map, clamped inside the ball."""
    out = mobius_add(np.asarray(x, dtype=np.float64), expmap0(u, c), c)
    return clip_to_ball(out, c)[0]


def logmap(x, y, c=1.0):
    return logmap0(mobius_add(-np.asarray(x, dtype=np.float64), y, c), c)


def dist(x, y, c=1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    num = 2.0 * c * _sq(x - y, keepdims=False)
    den = (1.0 - c * _sq(x, keepdims=False)) * (1.0 - c * _sq(y, keepdims=False))
    return arccosh1p(num / den) / math.sqrt(c)


def ball_to_lorentz(x, c=1.0):
    """Map ball coordinates onto the unit hyperboloid (after rescaling by sqrt(c))."""
    y = np.asarray(x, dtype=np.float64) * math.sqrt(c)
    y2 = _sq(y)
    return np.concatenate([1.0 + y2, 2.0 * y], axis=-1) / (1.0 - y2)


def lorentz_to_ball(w, c=1.0):
    w = np.asarray(w, dtype=np.float64)
    return w[..., 1:] / (1.0 + w[..., :1]) / math.sqrt(c)


def lorentz_spatial(x, c=1.0):
    """Spatial part ``2y / (1 - |y|^2)`` of the hyperboloid image, ``y = sqrt(c) x``."""
    y = np.asarray(x, dtype=np.float64) * math.sqrt(c)
    return 2.0 * y / (1.0 - _sq(y))


# ---------------------------------------------------------------------------
# typed operations
# ---------------------------------------------------------------------------


def _check_dims(a: Event, b: Event):
    if a.x.size != b.x.size:
        raise DimensionMismatch(f"spatial dimensions differ: {a.x.size} vs {b.x.size}")


def _check_curvature(x: PoincarePoint, y: PoincarePoint):
    if x.c != y.c:
        raise CurvatureMismatch(f"curvatures differ: {x.c} vs {y.c}")
    if x.dim != y.dim:
        raise DimensionMismatch(f"ball dimensions differ: {x.dim} vs {y.dim}")


def minkowski_inner(a: Event, b: Event) -> float:
    _check_dims(a, b)
    return -a.t * b.t + float(a.x @ b.x)


def default_tol(delta: Event) -> float:
    """Relative lightlike tolerance ``1e-9 (1 + |delta|^2)``."""
    return 1e-9 * (1.0 + delta.t**2 + float(delta.x @ delta.x))


def interval_classify(x: Event, y: Event, tol: float | None = None) -> IntervalClass:
    delta = y - x
    q = minkowski_inner(delta, delta)
    if tol is None:
        tol = default_tol(delta)
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    if abs(q) <= tol:
        return IntervalClass.LIGHTLIKE
    return IntervalClass.TIMELIKE if q < 0 else IntervalClass.SPACELIKE


def proper_time(path: list[Event], tol: float | None = None) -> float:
    """Proper time along a piecewise-straight path of events."""
    if len(path) < 2:
        raise ValueError("a path needs at least two events")
    total = 0.0
    for i, (a, b) in enumerate(zip(path[:-1], path[1:])):
        delta = b - a
        if delta.t <= 0:
            raise ValueError(f"segment {i} is not strictly time-ordered")
        q = minkowski_inner(delta, delta)
        seg_tol = default_tol(delta) if tol is None else tol
        if q > seg_tol:
            raise NonTimelikeSegment(f"segment {i} is spacelike (interval {q:g})")
        total += math.sqrt(max(-q, 0.0))
    return total


def conformal_factor(p: PoincarePoint) -> float:
    return 2.0 / (1.0 - p.c * float(p.v @ p.v))


def poincare_distance(x: PoincarePoint, y: PoincarePoint) -> float:
    _check_curvature(x, y)
    return float(dist(x.v, y.v, x.c))


def to_lorentz(x: PoincarePoint) -> LorentzPoint:
    return LorentzPoint(ball_to_lorentz(x.v, x.c))


def to_poincare(w: LorentzPoint, c: float = 1.0) -> PoincarePoint:
    return PoincarePoint(lorentz_to_ball(w.w, c), c)


def exp_map(base: PoincarePoint, u: TangentVector) -> PoincarePoint:
    if u.u.size != base.dim:
        raise DimensionMismatch("tangent vector and base point dimensions differ")
    raw = mobius_add(base.v, expmap0(u.u, base.c), base.c)
    v, saturated = clip_to_ball(raw, base.c)
    return PoincarePoint(v, base.c, saturated=bool(saturated))


def log_map(base: PoincarePoint, target: PoincarePoint) -> TangentVector:
    _check_curvature(base, target)
    return TangentVector(logmap(base.v, target.v, base.c))


def lorentz_distance(a: LorentzPoint, b: LorentzPoint) -> float:
    if a.w.size != b.w.size:
        raise DimensionMismatch("hyperboloid dimensions differ")
    # -<a,b> >= 1 on the sheet; clamp absorbs rounding
    return float(arccosh1p(-minkowski_dot(a.w, b.w) - 1.0))
