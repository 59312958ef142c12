"""Light cones over embedded frames.

Frames become events by taking the frame index as time and a spatial
embedding of the latent ball code as position. The default embedding is the
spatial part of the hyperboloid image of the latent, scaled by ``rho``; the
cones themselves live in flat space-time and use Euclidean spatial distance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .geometry import Event, PoincarePoint
from .rng import RandomState
from .wrapped_normal import WrappedNormal

DEFAULT_SLOPE = 1.0
DEFAULT_MAX_TRIALS = 100_000
APERTURE_MARGIN = 1.1
APERTURE_FALLBACK = 1.05
MIN_SLOPE = 1e-6

# (m, n) ball coordinates -> (m, n) spatial coordinates
EmbedMap = Callable[[np.ndarray], np.ndarray]


class Orientation(enum.Enum):
    FUTURE = "future"
    PAST = "past"


class Region(enum.Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    EXTERIOR = "exterior"


class ZeroAccepted(RuntimeError):
    """Rejection sampling finished its trial budget without an acceptance."""

    def __init__(self, message: str, trials: int = 0):
        super().__init__(message)
        self.trials = trials


@dataclass(frozen=True)
class LightCone:
    apex: Event
    slope: float = DEFAULT_SLOPE
    orientation: Orientation = Orientation.FUTURE

    def __post_init__(self):
        if not (math.isfinite(self.slope) and self.slope > 0):
            raise ValueError(f"slope must be finite and positive, got {self.slope}")


@dataclass(frozen=True)
class ConicSection:
    cone: LightCone
    t: float

    def __post_init__(self):
        dt = self.t - self.cone.apex.t
        if self.cone.orientation is Orientation.FUTURE and dt < 0:
            raise ValueError("a future cone can only be cut at or after its apex")
        if self.cone.orientation is Orientation.PAST and dt > 0:
            raise ValueError("a past cone can only be cut at or before its apex")


@dataclass(frozen=True, eq=False)
class EmbeddedFrameEvent:
    frame_index: int
    event: Event
    latent: PoincarePoint


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def lorentz_embedding(rho: float = 1.0, c: float = 1.0) -> EmbedMap:
    """Spatial part of the hyperboloid image, scaled by ``rho``."""

    def embed(z):
        return rho * geo.lorentz_spatial(z, c)

    return embed


def ball_embedding(rho: float = 1.0) -> EmbedMap:
    """Raw ball coordinates scaled by ``rho``."""

    def embed(z):
        return rho * np.asarray(z, dtype=np.float64)

    return embed


def embed_frame(frame_index: int, latent: PoincarePoint, embed_map: EmbedMap, dt: float = 1.0) -> EmbeddedFrameEvent:
    x = embed_map(latent.v[None, :])[0]
    return EmbeddedFrameEvent(frame_index, Event(frame_index * dt, x), latent)


# ---------------------------------------------------------------------------
# membership
# ---------------------------------------------------------------------------


def _signed_dt(cone: LightCone, t):
    dt = np.asarray(t, dtype=np.float64) - cone.apex.t
    return dt if cone.orientation is Orientation.FUTURE else -dt


def contains_array(cone: LightCone, t, x, tol: float = 0.0) -> np.ndarray:
    """Vectorised :func:`contains` for events ``(t, x[i])`` sharing one time."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != cone.apex.dim:
        raise geo.DimensionMismatch("event and apex dimensions differ")
    dt = _signed_dt(cone, t)
    r = np.sqrt(np.sum((x - cone.apex.x) ** 2, axis=-1))
    return (dt >= -tol) & (r <= cone.slope * dt + tol)


def contains(cone: LightCone, e: Event, tol: float = 0.0) -> bool:
    geo._check_dims(cone.apex, e)
    return bool(contains_array(cone, e.t, e.x[None, :], tol)[0])


def boundary_classify(cone: LightCone, e: Event, tol: float | None = None) -> Region:
    geo._check_dims(cone.apex, e)
    dt = float(_signed_dt(cone, e.t))
    r = float(np.linalg.norm(e.x - cone.apex.x))
    if tol is None:
        tol = geo.default_tol(e - cone.apex)
    if dt < -tol:
        return Region.EXTERIOR
    gap = r - cone.slope * abs(dt)
    if abs(gap) <= tol:
        return Region.BOUNDARY
    return Region.INTERIOR if gap < 0 else Region.EXTERIOR


def section_radius(s: ConicSection) -> float:
    return s.cone.slope * abs(s.t - s.cone.apex.t)


def intersection_contains_array(cones: Sequence[LightCone], t, x, tol: float = 0.0) -> np.ndarray:
    if not cones:
        raise ValueError("need at least one cone")
    ok = contains_array(cones[0], t, x, tol)
    for cone in cones[1:]:
        ok &= contains_array(cone, t, x, tol)
    return ok


def intersection_contains(cones: Sequence[LightCone], e: Event, tol: float = 0.0) -> bool:
    if not cones:
        raise ValueError("need at least one cone")
    return all(contains(c, e, tol) for c in cones)


def _section_balls(cones: Sequence[LightCone], t: float):
    for cone in cones:
        if cone.orientation is not Orientation.FUTURE:
            raise ValueError("feasibility test expects future cones")
        if cone.apex.t > t:
            raise ValueError("section time precedes a cone apex")
    centers = np.stack([c.apex.x for c in cones])
    radii = np.array([section_radius(ConicSection(c, t)) for c in cones])
    return centers, radii


def section_intersection_nonempty(cones: Sequence[LightCone], t: float) -> bool | None:
    """Whether the sections of ``cones`` at time ``t`` share a point.

    Exact for one or two cones. For more, returns ``False`` when some pair of
    section balls is disjoint, ``True`` when a witness point is found, and
    ``None`` when neither is certified (callers should just try sampling).
    """
    if not cones:
        raise ValueError("need at least one cone")
    centers, radii = _section_balls(cones, t)
    k = len(cones)
    if k == 1:
        return True
    for i in range(k):
        for j in range(i + 1, k):
            if np.linalg.norm(centers[i] - centers[j]) > radii[i] + radii[j]:
                return False
    if k == 2:
        return True
    # witness search: alternating projections onto the balls
    p = np.average(centers, axis=0, weights=1.0 / np.maximum(radii, 1e-12))
    for _ in range(500):
        for c, r in zip(centers, radii):
            d = p - c
            n = np.linalg.norm(d)
            if n > r:
                p = c + d * (r / n)
        if np.all(np.linalg.norm(centers - p, axis=1) <= radii * (1 + 1e-12) + 1e-12):
            return True
    return None


def earliest_feasible_time(cones: Sequence[LightCone], t_start: float, t_max: float, step: float = 1.0) -> float | None:
    """First ``t`` on the grid ``t_start, t_start + step, ...`` with a non-empty section."""
    t = max(t_start, max(c.apex.t for c in cones))
    while t <= t_max:
        if section_intersection_nonempty(cones, t) is not False:
            return t
        t += step
    return None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SectionSample:
    events: list[Event]
    latents: np.ndarray
    attempted: int
    accepted: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 1.0


def sample_in_section(
    cones: Sequence[LightCone],
    t: float,
    proposal: WrappedNormal,
    embed_map: EmbedMap,
    rng: RandomState,
    max_trials: int = DEFAULT_MAX_TRIALS,
    n_accept: int | None = None,
    chunk: int = 8192,
) -> SectionSample:
    """Rejection-sample latents whose events at time ``t`` lie in every cone.

    Draws proceed in fixed-size chunks from ``rng`` until ``max_trials`` have
    been attempted, or until ``n_accept`` acceptances when given; in that case
    ``attempted`` counts trials up to and including the last accepted one.
    """
    if max_trials < 1:
        raise ValueError("max_trials must be at least 1")
    if not cones:
        raise ValueError("need at least one cone")
    latents = []
    attempted = 0
    n_acc = 0
    while attempted < max_trials:
        m = min(chunk, max_trials - attempted)
        z = proposal.sample_array(rng, m)
        ok = intersection_contains_array(cones, t, embed_map(z))
        idx = np.flatnonzero(ok)
        if n_accept is not None and n_acc + idx.size >= n_accept:
            idx = idx[: n_accept - n_acc]
            latents.append(z[idx])
            n_acc += idx.size
            attempted += int(idx[-1]) + 1 if idx.size else 0
            break
        latents.append(z[idx])
        n_acc += idx.size
        attempted += m
    if n_acc == 0:
        raise ZeroAccepted(f"no sample accepted at t={t} after {attempted} trials", attempted)
    z = np.concatenate(latents, axis=0)
    spatial = embed_map(z)
    events = [Event(t, s) for s in spatial]
    return SectionSample(events, z, attempted, n_acc)


def acceptance_rate(
    cones: Sequence[LightCone],
    t: float,
    proposal: WrappedNormal,
    embed_map: EmbedMap,
    rng: RandomState,
    n: int,
) -> float:
    """Fraction of ``n`` proposal draws landing in the section; never raises."""
    try:
        return sample_in_section(cones, t, proposal, embed_map, rng, n).acceptance_rate
    except ZeroAccepted:
        return 0.0


def estimate_aperture(
    positives: Sequence[Sequence[EmbeddedFrameEvent]],
    negatives: Sequence[tuple[EmbeddedFrameEvent, EmbeddedFrameEvent]] = (),
    margin: float = APERTURE_MARGIN,
) -> float:
    """Cone slope from observed sequences and counter-example pairs.

    The fastest observed step in ``positives`` is a lower bound on the slope;
    the slowest counter-example faster than that is an upper bound, capped at
    ``margin`` times the lower bound. The result is the midpoint of the
    bracket, or 1.05 times the lower bound without a usable counter-example.
    """
    if not positives:
        raise ValueError("need at least one positive sequence")
    lower = 0.0
    for seq in positives:
        if len(seq) < 2:
            raise ValueError("positive sequences need at least two frames")
        for a, b in zip(seq[:-1], seq[1:]):
            dt = b.event.t - a.event.t
            if dt <= 0:
                raise ValueError("positive sequence timestamps must increase")
            lower = max(lower, float(np.linalg.norm(b.event.x - a.event.x)) / dt)
    upper = math.inf
    for a, b in negatives:
        dt = b.event.t - a.event.t
        if dt <= 0:
            raise ValueError("negative pairs must be time-ordered")
        speed = float(np.linalg.norm(b.event.x - a.event.x)) / dt
        if speed > lower:
            upper = min(upper, speed)
    if math.isinf(upper):
        slope = lower * APERTURE_FALLBACK
    else:
        slope = 0.5 * (lower + min(upper, lower * margin))
    return max(slope, MIN_SLOPE)


def _probe(state, horizon, proposal, rng, k, embed_map, slope, max_trials, orientation):
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        # the section at the apex time is the apex itself
        return SectionSample([state.event], state.latent.v[None, :].copy(), 0, 1)
    cone = LightCone(state.event, slope, orientation)
    sign = 1.0 if orientation is Orientation.FUTURE else -1.0
    t = state.event.t + sign * horizon
    return sample_in_section([cone], t, proposal, embed_map, rng, max_trials, n_accept=k)


def probe_futures(
    state: EmbeddedFrameEvent,
    horizon: float,
    proposal: WrappedNormal,
    rng: RandomState,
    k: int,
    embed_map: EmbedMap | None = None,
    slope: float = DEFAULT_SLOPE,
    max_trials: int = DEFAULT_MAX_TRIALS,
) -> SectionSample:
    """Up to ``k`` events reachable from ``state`` after ``horizon``."""
    embed_map = embed_map or lorentz_embedding(c=proposal.c)
    return _probe(state, horizon, proposal, rng, k, embed_map, slope, max_trials, Orientation.FUTURE)


def probe_pasts(
    state: EmbeddedFrameEvent,
    horizon: float,
    proposal: WrappedNormal,
    rng: RandomState,
    k: int,
    embed_map: EmbedMap | None = None,
    slope: float = DEFAULT_SLOPE,
    max_trials: int = DEFAULT_MAX_TRIALS,
) -> SectionSample:
    """Up to ``k`` events that could have led to ``state`` ``horizon`` earlier."""
    embed_map = embed_map or lorentz_embedding(c=proposal.c)
    return _probe(state, horizon, proposal, rng, k, embed_map, slope, max_trials, Orientation.PAST)
