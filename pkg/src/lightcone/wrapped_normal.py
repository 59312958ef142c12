"""Wrapped normal distribution on the Poincare ball.

A draw is a tangent-space Gaussian ``z_e ~ N(0, diag(sigma^2))`` at the mean
pushed through the exponential map. In the unit-speed tangent convention of
:mod:`lightcone.geometry` that is ``z = exp_map(mu, z_e)``; with Euclidean
tangent coordinates the same point is written ``exp_mu(z_e / lambda_mu)``.

The density with respect to the Riemannian volume element is::

    N(log_map(mu, z) | 0, Sigma) * (r / sinh r)^(d - 1),  r = sqrt(c) d(mu, z)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import PoincarePoint
from .rng import RandomState

LOG_2PI = math.log(2.0 * math.pi)


def log_r_over_sinh(r):
    """``log(r / sinh r)`` with the removable singularity at 0 filled in."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    # log(sinh r) = r + log(1 - exp(-2r)) - log 2 stays finite for large r
    big = rs - np.log(rs) + np.log(-np.expm1(-2.0 * rs)) - math.log(2.0)
    return np.where(small, -(r**2) / 6.0 + r**4 / 180.0, -big)


@dataclass(frozen=True, eq=False)
class WrappedNormal:
    mu: PoincarePoint
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=np.float64).reshape(-1)
        if sigma.size == 1 and self.mu.dim > 1:
            sigma = np.full(self.mu.dim, sigma[0])
        if sigma.size != self.mu.dim:
            raise geo.DimensionMismatch("sigma length must match the ball dimension")
        if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
            raise ValueError("sigma entries must be finite and positive")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def c(self) -> float:
        return self.mu.c

    @property
    def dim(self) -> int:
        return self.mu.dim

    @classmethod
    def standard(cls, dim: int, c: float = 1.0, sigma: float = 1.0) -> "WrappedNormal":
        return cls(PoincarePoint(np.zeros(dim), c), np.full(dim, sigma))

    # batch API -------------------------------------------------------------

    def sample_array(self, rng: RandomState, n: int) -> np.ndarray:
        """``n`` draws as an ``(n, dim)`` array of ball coordinates."""
        z_e = rng.normal((n, self.dim)) * self.sigma
        return geo.expmap(self.mu.v, z_e, self.c)

    def log_density_array(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        u = geo.logmap(self.mu.v, z, self.c)
        r = math.sqrt(self.c) * np.sqrt(np.sum(u * u, axis=-1))
        gauss = -0.5 * np.sum((u / self.sigma) ** 2, axis=-1) - np.sum(np.log(self.sigma)) - 0.5 * self.dim * LOG_2PI
        return gauss + (self.dim - 1) * log_r_over_sinh(r)


def sample(d: WrappedNormal, rng: RandomState) -> PoincarePoint:
    z = d.sample_array(rng, 1)[0]
    z, saturated = geo.clip_to_ball(z, d.c)
    return PoincarePoint(z, d.c, saturated=bool(saturated))


def log_density(d: WrappedNormal, z: PoincarePoint) -> float:
    if z.c != d.c:
        raise geo.CurvatureMismatch("point and distribution curvatures differ")
    if z.dim != d.dim:
        raise geo.DimensionMismatch("point and distribution dimensions differ")
    return float(d.log_density_array(z.v)[0])


def kl_monte_carlo(q: WrappedNormal, p: WrappedNormal, n: int, rng: RandomState) -> float:
    """Unbiased estimate of ``KL(q || p)`` from ``n`` draws of ``q``."""
    if n < 1:
        raise ValueError("need at least one sample")
    z = q.sample_array(rng, n)
    return float(np.mean(q.log_density_array(z) - p.log_density_array(z)))


def kl_monte_carlo_stderr(q: WrappedNormal, p: WrappedNormal, n: int, rng: RandomState) -> tuple[float, float]:
    """Like :func:`kl_monte_carlo` but also returns the standard error."""
    z = q.sample_array(rng, n)
    terms = q.log_density_array(z) - p.log_density_array(z)
    se = float(np.std(terms, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return float(np.mean(terms)), se
