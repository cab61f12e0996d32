"""Projected Gaussian process layer.

An angle theta(s) is the projection onto the unit circle of a latent
bivariate Gaussian X(s) = (X1(s), X2(s)); augmenting the angle with its
radius R(s) gives the tractable joint density

    f(r, t) = N_2k(x; m, Sigma) * prod_i r_i,   x = (r*cos(t), r*sin(t)),

stored component-major (all cosine entries first).  The single-site angular
marginal integrates the radius out analytically; it is the pointwise
likelihood used for model scoring.

Angles are radians in [0, 2*pi), counterclockwise from the positive first
axis; the CLI converts meteorological degree conventions on ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx

from .errors import ParameterError
from .numerics import LOG_2PI, SpdMatrix, mvn_logpdf, mvn_sample

__all__ = [
    "TWO_PI",
    "AngularObservation",
    "angle_from_xy",
    "xy_from_polar",
    "joint_logdensity",
    "marginal_angle_logpdf",
    "sample_pgp",
]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class AngularObservation:
    """One augmented angular datum: angle in [0, 2*pi) and latent radius > 0."""

    theta: float
    radius: float

    def __post_init__(self):
        if not (0.0 <= self.theta < TWO_PI):
            raise ParameterError(f"theta must lie in [0, 2*pi), got {self.theta}")
        if not (self.radius > 0.0):
            raise ParameterError(f"radius must be > 0, got {self.radius}")


def angle_from_xy(x1, x2):
    """Quadrant-correct angle of (x1, x2) in [0, 2*pi)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if np.any((x1 == 0.0) & (x2 == 0.0)):
        raise ParameterError("angle of the zero vector is undefined")
    out = np.mod(np.arctan2(x2, x1), TWO_PI)
    # arctan2(-0.0, 1.0) is -0.0; mod can return 2*pi for tiny negatives
    out = np.where(out >= TWO_PI, 0.0, out)
    return out if out.ndim else float(out)


def xy_from_polar(radii, thetas) -> np.ndarray:
    """Component-major Cartesian vector(s) (r*cos t, then r*sin t)."""
    radii = np.asarray(radii, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    return np.concatenate([radii * np.cos(thetas), radii * np.sin(thetas)], axis=-1)


def joint_logdensity(radii, thetas, mean: np.ndarray, cov: SpdMatrix) -> float:
    """Augmented joint log-density of (R, theta) over k sites.

    Equals the 2k-dim Gaussian log-density at x = (r cos t, r sin t) plus the
    Jacobian term sum_i log r_i.
    """
    radii = np.asarray(radii, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    if radii.shape != thetas.shape:
        raise ParameterError("radii and thetas must have matching shapes")
    if np.any(radii <= 0.0):
        raise ParameterError("radii must be strictly positive")
    x = xy_from_polar(radii, thetas)
    return mvn_logpdf(x, mean, cov) + float(np.sum(np.log(radii)))


def _pn_loglik_terms(cos_t, sin_t, m1, m2, cov2):
    """Closed-form projected-normal log-density, vectorized.

    With Q = cov2^{-1}, u = (cos t, sin t), A = u'Qu, B = u'Qm, C = m'Qm and
    D = B/sqrt(A), integrating r * N_2(r*u; m, cov2) over r in (0, inf) gives

        f(t) = exp(-C/2) / (2*pi*A*sqrt(|cov2|)) * g(D),
        g(D) = 1 + sqrt(pi/2) * D * erfcx(-D/sqrt(2)),

    where erfcx keeps g accurate for D far below zero.
    """
    a, b = cov2[0, 0], cov2[0, 1]
    c, d = cov2[1, 0], cov2[1, 1]
    det = a * d - b * c
    if not (det > 0.0 and a > 0.0):
        raise ParameterError("cov2 must be symmetric positive definite")
    # inverse of [[a, b], [b, d]] / det
    q11, q12, q22 = d / det, -b / det, a / det
    aa = cos_t * (q11 * cos_t + q12 * sin_t) + sin_t * (q12 * cos_t + q22 * sin_t)
    bb = cos_t * (q11 * m1 + q12 * m2) + sin_t * (q12 * m1 + q22 * m2)
    cc = m1 * (q11 * m1 + q12 * m2) + m2 * (q12 * m1 + q22 * m2)
    dd = bb / np.sqrt(aa)
    g = 1.0 + np.sqrt(np.pi / 2.0) * dd * erfcx(-dd / np.sqrt(2.0))
    return -LOG_2PI - 0.5 * np.log(det) - np.log(aa) - 0.5 * cc + np.log(g)


def marginal_angle_logpdf(theta, mean2, cov2) -> float | np.ndarray:
    """Log-density of the single-site angular marginal (radius integrated out).

    ``mean2`` is the latent bivariate mean (cosine component first), ``cov2``
    the 2x2 latent covariance.  Vectorized over ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    mean2 = np.asarray(mean2, dtype=float)
    cov2 = np.asarray(getattr(cov2, "entries", cov2), dtype=float)
    if mean2.shape != (2,) or cov2.shape != (2, 2):
        raise ParameterError("mean2 must be length 2 and cov2 2x2")
    out = _pn_loglik_terms(np.cos(theta), np.sin(theta), mean2[0], mean2[1], cov2)
    return out if out.ndim else float(out)


def sample_pgp(mean: np.ndarray, cov: SpdMatrix, rng: np.random.Generator, size=None):
    """Draw angles and radii from the projected Gaussian process.

    ``mean`` is the component-major 2k-vector.  Returns (angles, radii), each
    of shape (k,) for size=None or (size, k) otherwise.
    """
    mean = np.asarray(mean, dtype=float)
    k = mean.size // 2
    if mean.size != 2 * k or mean.size != cov.dim:
        raise ParameterError("mean must be a 2k-vector matching cov")
    n = 1 if size is None else int(size)
    x = mean[None, :] + rng.standard_normal((n, cov.dim)) @ cov.chol.T
    x1, x2 = x[:, :k], x[:, k:]
    angles = angle_from_xy(x1, x2)
    radii = np.hypot(x1, x2)
    if size is None:
        return angles[0], radii[0]
    return angles, radii
