"""Deterministic numerical kernels: covariance construction and multivariate
normal machinery shared by the sampler, the predictor and the simulator.

Conventions
-----------
* Distances are Euclidean on the provided coordinates (planar); callers may
  pre-project lon/lat if needed.
* The bivariate angular process is stored component-major: a 2k-vector holds
  the k cosine components first, then the k sine components, so its
  covariance is literally ``kron(T, C)`` with ``C`` the k x k spatial
  correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.spatial.distance import cdist

from .errors import ParameterError, SingularityError

__all__ = [
    "CovParams",
    "AngularCovParams",
    "SpdMatrix",
    "powered_exponential",
    "pairwise_distances",
    "corr_matrix",
    "build_gev_cov",
    "build_angular_cov",
    "mvn_logpdf",
    "mvn_sample",
    "mvn_conditional",
    "inverse_gamma_sample",
    "lognormal_step",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# Jitter ladder: fractions of mean diagonal added when a factorization fails.
_JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class CovParams:
    """Powered-exponential covariance parameters: gamma(h) = sill * exp(-(h/lam)^kappa).

    sill   marginal variance (data units squared), > 0
    lam    range (distance units), > 0
    kappa  smoothness exponent, in (0, 2]
    """

    sill: float
    lam: float
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.sill > 0.0):
            raise ParameterError(f"sill must be > 0, got {self.sill}")
        if not (self.lam > 0.0):
            raise ParameterError(f"range must be > 0, got {self.lam}")
        if not (0.0 < self.kappa <= 2.0):
            raise ParameterError(f"kappa must be in (0, 2], got {self.kappa}")


@dataclass(frozen=True)
class AngularCovParams:
    """Separable cross-covariance of the bivariate angular process.

    The 2x2 component block is
        T = [[tau, rho*sqrt(tau)], [rho*sqrt(tau), 1.0]],
    the second (sine) component variance being pinned to 1 for
    identifiability.  ``lam``/``kappa`` parameterize the unit-sill spatial
    correlation shared by both components.
    """

    tau: float
    rho: float
    lam: float
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0.0):
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not (abs(self.rho) < 1.0):
            raise ParameterError(f"rho must lie in (-1, 1), got {self.rho}")
        if not (self.lam > 0.0):
            raise ParameterError(f"range must be > 0, got {self.lam}")
        if not (0.0 < self.kappa <= 2.0):
            raise ParameterError(f"kappa must be in (0, 2], got {self.kappa}")

    @property
    def t_block(self) -> np.ndarray:
        off = self.rho * np.sqrt(self.tau)
        return np.array([[self.tau, off], [off, 1.0]])


class SpdMatrix:
    """Dense symmetric positive-definite matrix with a cached Cholesky factor.

    Factorization applies an escalating diagonal jitter (1e-10 to 1e-6 times
    the mean diagonal) before giving up with SingularityError.
    """

    __slots__ = ("entries", "dim", "_chol", "_jitter")

    def __init__(self, entries: np.ndarray):
        a = np.asarray(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ParameterError(f"expected a square matrix, got shape {a.shape}")
        scale = np.max(np.abs(a)) or 1.0
        if np.max(np.abs(a - a.T)) > 1e-12 * scale:
            raise ParameterError("matrix is not symmetric to 1e-12 relative tolerance")
        self.entries = 0.5 * (a + a.T)
        self.dim = a.shape[0]
        self._chol = None
        self._jitter = 0.0

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor L with L @ L.T == entries (+ jitter)."""
        if self._chol is None:
            base = np.trace(self.entries) / self.dim
            for level in _JITTER_LEVELS:
                try:
                    self._chol = sla.cholesky(
                        self.entries + level * base * np.eye(self.dim), lower=True
                    )
                    self._jitter = level * base
                    break
                except sla.LinAlgError:
                    continue
            else:
                raise SingularityError(
                    f"Cholesky failed for {self.dim}x{self.dim} matrix even with "
                    f"jitter up to 1e-6 * trace/dim"
                )
        return self._chol

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve((self.chol, True), np.asarray(b, dtype=float))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))


def powered_exponential(h, p: CovParams):
    """Covariance sill * exp(-(h/lam)^kappa) at distance(s) h >= 0."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0.0):
        raise ParameterError("distances must be nonnegative")
    out = p.sill * np.exp(-((h / p.lam) ** p.kappa))
    return out if out.ndim else float(out)


def pairwise_distances(sites: np.ndarray) -> np.ndarray:
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    return cdist(sites, sites)


def corr_matrix(sites: np.ndarray, lam: float, kappa: float = 1.0) -> np.ndarray:
    """Unit-sill powered-exponential correlation matrix over sites."""
    d = pairwise_distances(sites)
    return np.exp(-((d / lam) ** kappa))


def build_gev_cov(sites: np.ndarray, p: CovParams) -> SpdMatrix:
    """k x k powered-exponential covariance matrix over the site set."""
    return SpdMatrix(p.sill * corr_matrix(sites, p.lam, p.kappa))


def build_angular_cov(sites: np.ndarray, p: AngularCovParams) -> SpdMatrix:
    """2k x 2k separable cross-covariance kron(T, C), component-major order."""
    c = corr_matrix(sites, p.lam, p.kappa)
    return SpdMatrix(np.kron(p.t_block, c))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: SpdMatrix) -> float:
    """Exact multivariate normal log-density via the cached factorization."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape or x.shape != (cov.dim,):
        raise ParameterError(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov dim {cov.dim}"
        )
    z = sla.solve_triangular(cov.chol, x - mean, lower=True)
    return -0.5 * (cov.dim * LOG_2PI + cov.logdet() + float(z @ z))


def mvn_sample(mean: np.ndarray, cov: SpdMatrix, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    return mean + cov.chol @ rng.standard_normal(cov.dim)


def mvn_conditional(
    mean: np.ndarray,
    cov: SpdMatrix,
    observed_idx,
    observed_vals,
) -> tuple[np.ndarray, SpdMatrix]:
    """Gaussian conditioning: distribution of the unobserved block given the
    observed one, by the Schur-complement identities.

    Returns (cond_mean, cond_cov) over the complement of observed_idx, in
    increasing index order.
    """
    mean = np.asarray(mean, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    vals = np.asarray(observed_vals, dtype=float)
    n = cov.dim
    if obs.size == 0 or obs.size >= n:
        raise ParameterError("observed_idx must be a nonempty proper subset")
    if np.unique(obs).size != obs.size:
        raise ParameterError("observed_idx contains duplicates")
    rest = np.setdiff1d(np.arange(n), obs)

    s_oo = SpdMatrix(cov.entries[np.ix_(obs, obs)])
    s_ro = cov.entries[np.ix_(rest, obs)]
    w = s_oo.solve(s_ro.T)  # S_oo^{-1} S_or
    cond_mean = mean[rest] + s_ro @ s_oo.solve(vals - mean[obs])
    cond_cov = cov.entries[np.ix_(rest, rest)] - s_ro @ w
    return cond_mean, SpdMatrix(cond_cov)


def inverse_gamma_sample(shape: float, rate: float, rng: np.random.Generator) -> float:
    """Draw from InvGamma(shape, rate): density ~ x^(-shape-1) exp(-rate/x),
    mean rate/(shape-1) for shape > 1."""
    if not (shape > 0.0 and rate > 0.0):
        raise ParameterError("inverse gamma requires shape > 0 and rate > 0")
    return rate / rng.gamma(shape, 1.0)


def lognormal_step(
    current: float, step_sd: float, rng: np.random.Generator
) -> tuple[float, float]:
    """Log-normal random-walk proposal around ``current``.

    Returns (proposal, log_hastings_correction); the correction is
    log(proposal/current), the usual asymmetry term for this proposal.
    """
    if not (current > 0.0):
        raise ParameterError("lognormal_step requires current > 0")
    if step_sd < 0.0:
        raise ParameterError("step_sd must be >= 0")
    log_ratio = step_sd * rng.standard_normal()
    proposal = current * np.exp(log_ratio)
    return float(proposal), float(log_ratio)
