"""Generalized extreme value distribution kernel for the block-maxima layer.

All densities work in log space; a value outside the support
{sigma + xi*(z - mu) > 0} yields -inf rather than an error, which is what
the Metropolis steps rely on.  The Gumbel branch takes over for
|xi| < 1e-8 to avoid catastrophic cancellation in (1 + xi*t)^(-1/xi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import ParameterError

__all__ = [
    "GUMBEL_EPS",
    "GevParams",
    "gev_logpdf",
    "gev_cdf",
    "gev_quantile",
    "gev_sample",
    "gev_logpdf_parts",
    "gev_cdf_parts",
    "gev_quantile_parts",
    "fit_gev_pwm",
]

GUMBEL_EPS = 1e-8


@dataclass(frozen=True)
class GevParams:
    """Location mu, scale sigma > 0, shape xi."""

    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")


def gev_logpdf_parts(z, mu, sigma, xi):
    """Vectorized GEV log-density with broadcasting over all arguments."""
    z, mu, sigma, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (z, mu, sigma, xi))
    )
    t = (z - mu) / sigma
    out = np.full(t.shape, -np.inf)

    gum = np.abs(xi) < GUMBEL_EPS
    if np.any(gum):
        tg = t[gum]
        out[gum] = -np.log(sigma[gum]) - tg - np.exp(-tg)

    gen = ~gum
    if np.any(gen):
        w = np.where(gen, 1.0 + xi * t, 1.0)
        ok = gen & (w > 0.0)
        if np.any(ok):
            logw = np.log(w[ok])
            xio = xi[ok]
            out[ok] = -np.log(sigma[ok]) - (1.0 + 1.0 / xio) * logw - np.exp(-logw / xio)
    return out


def gev_cdf_parts(z, mu, sigma, xi):
    z, mu, sigma, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (z, mu, sigma, xi))
    )
    t = (z - mu) / sigma
    out = np.empty(t.shape)

    gum = np.abs(xi) < GUMBEL_EPS
    out[gum] = np.exp(-np.exp(-t[gum]))

    gen = ~gum
    if np.any(gen):
        w = 1.0 + xi[gen] * t[gen]
        wc = np.maximum(w, 0.0)
        with np.errstate(divide="ignore", over="ignore"):
            val = np.exp(-np.power(wc, -1.0 / xi[gen]))
        # below the lower endpoint (xi>0): w<=0 -> cdf 0; above the upper
        # endpoint (xi<0): w<=0 -> cdf 1
        val = np.where(w <= 0.0, np.where(xi[gen] > 0.0, 0.0, 1.0), val)
        out[gen] = val
    return out


def gev_quantile_parts(pr, mu, sigma, xi):
    pr, mu, sigma, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (pr, mu, sigma, xi))
    )
    if np.any(pr <= 0.0) or np.any(pr >= 1.0):
        raise ParameterError("quantile probability must lie in (0, 1)")
    y = -np.log(pr)
    out = np.empty(pr.shape)
    gum = np.abs(xi) < GUMBEL_EPS
    out[gum] = mu[gum] - sigma[gum] * np.log(y[gum])
    gen = ~gum
    if np.any(gen):
        out[gen] = mu[gen] + sigma[gen] / xi[gen] * (np.power(y[gen], -xi[gen]) - 1.0)
    return out


def gev_logpdf(z, p: GevParams):
    out = gev_logpdf_parts(z, p.mu, p.sigma, p.xi)
    return out if out.ndim else float(out)


def gev_cdf(z, p: GevParams):
    out = gev_cdf_parts(z, p.mu, p.sigma, p.xi)
    return out if out.ndim else float(out)


def gev_quantile(pr, p: GevParams):
    out = gev_quantile_parts(pr, p.mu, p.sigma, p.xi)
    return out if out.ndim else float(out)


def gev_sample(p: GevParams, rng: np.random.Generator, size=None):
    """Inverse-CDF sampling; a uniform draw of exactly 0 is resampled."""
    u = rng.uniform(size=size)
    u = np.where(u == 0.0, 0.5, u) if size is not None else (u or 0.5)
    out = gev_quantile_parts(u, p.mu, p.sigma, p.xi)
    return out if out.ndim else float(out)


def fit_gev_pwm(sample, xi_bounds=(-0.5, 0.5)) -> GevParams:
    """Probability-weighted-moment GEV fit (Hosking's approximation).

    Used only to initialize MCMC chains: the shape is clamped to
    ``xi_bounds``, and the fit falls back to Gumbel whenever the sample would
    land outside the implied support (negative-shape fits occasionally
    exclude the sample maximum).
    """
    x = np.sort(np.asarray(sample, dtype=float))
    x = x[np.isfinite(x)]
    n = x.size
    if n < 3:
        raise ParameterError("PWM fit needs at least 3 observations")
    j = np.arange(1, n + 1)
    b0 = np.mean(x)
    b1 = np.sum((j - 1) / (n - 1) * x) / n
    b2 = np.sum((j - 1) * (j - 2) / ((n - 1) * (n - 2)) * x) / n
    l1, l2, l3 = b0, 2 * b1 - b0, 6 * b2 - 6 * b1 + b0
    if l2 <= 0:
        return GevParams(mu=float(b0), sigma=max(1e-3, float(np.std(x))), xi=0.0)
    t3 = l3 / l2
    c = 2.0 / (3.0 + t3) - np.log(2.0) / np.log(3.0)
    kk = 7.8590 * c + 2.9554 * c**2  # Hosking's k = -xi
    xi = float(np.clip(-kk, *xi_bounds))
    kk = -xi
    if abs(kk) < 1e-6:
        sigma = l2 / np.log(2.0)
        mu = l1 - sigma * np.euler_gamma
    else:
        g = gamma_fn(1.0 + kk)
        sigma = l2 * kk / ((1.0 - 2.0 ** (-kk)) * g)
        mu = l1 - sigma * (1.0 - g) / kk
    sigma = max(float(sigma), 1e-6)
    p = GevParams(mu=float(mu), sigma=sigma, xi=xi)
    if np.any(~np.isfinite(gev_logpdf_parts(x, p.mu, p.sigma, p.xi))):
        p = GevParams(mu=float(mu), sigma=sigma, xi=0.0)
    return p
