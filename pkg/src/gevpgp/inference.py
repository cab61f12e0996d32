"""Posterior-predictive machinery: kriging the GEV fields to new sites,
angular prediction, return levels, circular summaries, and WAIC scoring.

Prediction walks the retained chain: for each iterate, the GEV parameters at
a query site are drawn from the Gaussian conditional given that iterate's
latent fields and hyperparameters; a new event's angle is then drawn from
the bivariate marginal at the query site, its mean rebuilt from the GEV
values just drawn.  Conditioning the angle on any observed replicate's
latent vector would predict a past event rather than a new one, so it is
deliberately avoided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .extremes import gev_logpdf_parts, gev_quantile_parts
from .model import Dataset, ModelSpec, design_matrix
from .numerics import SpdMatrix, corr_matrix
from .pgp import TWO_PI, _pn_loglik_terms, angle_from_xy
from .sampler import LAYERS, _t_block_parts
from .trace import Trace

__all__ = [
    "QuerySites",
    "PredictionDraws",
    "ReturnLevelSummary",
    "CircularSummary",
    "WaicReport",
    "predict_site",
    "return_level",
    "circular_summary",
    "waic",
]


@dataclass
class QuerySites:
    """Unobserved locations to predict at, with the covariates the model needs."""

    site_ids: list[str]
    coords: np.ndarray
    covariates: dict[str, np.ndarray]

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        m = self.coords.shape[0]
        if self.coords.shape != (m, 2):
            raise ValidationError(f"query coords must be (m, 2), got {self.coords.shape}")
        if len(self.site_ids) != m:
            raise ValidationError("site_ids length must match coords")
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for name, v in self.covariates.items():
            if v.shape != (m,):
                raise ValidationError(f"query covariate {name!r} must have shape ({m},)")

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    def as_dataset(self) -> Dataset:
        m = self.m
        return Dataset(
            station_ids=list(self.site_ids),
            coords=self.coords,
            covariates=self.covariates,
            years=np.zeros(1, dtype=int),
            eta=np.full((1, m), np.nan),
            theta=np.full((1, m), np.nan),
        )


@dataclass
class PredictionDraws:
    """Per-iteration posterior-predictive draws at each query site.

    Arrays are (n_draws, m).  ``theta`` is None for GEV-only models.
    """

    site_ids: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    theta: np.ndarray | None


@dataclass
class ReturnLevelSummary:
    prob: float
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class CircularSummary:
    """Main posterior mode, circular standard deviation and mode count."""

    mode: float
    dispersion: float
    n_modes: int


@dataclass
class WaicReport:
    waic_theta: float
    waic_eta: float
    waic_total: float
    lppd_theta: float
    lppd_eta: float
    p_waic_theta: float
    p_waic_eta: float

    def to_dict(self) -> dict:
        return {
            "waic_theta": self.waic_theta,
            "waic_eta": self.waic_eta,
            "waic_total": self.waic_total,
            "lppd_theta": self.lppd_theta,
            "lppd_eta": self.lppd_eta,
            "p_waic_theta": self.p_waic_theta,
            "p_waic_eta": self.p_waic_eta,
        }


def _validate_query(spec: ModelSpec, query: QuerySites) -> None:
    needed = set()
    for attr in ("mu_terms", "sigma_terms", "xi_terms", "theta1_terms", "theta2_terms"):
        for t in getattr(spec, attr) or ():
            if t.kind == "covariate":
                needed.add(t.name)
    missing = needed - set(query.covariates)
    if missing:
        raise ValidationError(f"query sites are missing covariates: {sorted(missing)}")


def _theta_mean_at(spec: ModelSpec, ds: Dataset, beta_theta, mu, sigma, xi):
    d1 = design_matrix(spec.theta1_terms, ds, mu, sigma, xi)
    d2 = design_matrix(spec.theta2_terms, ds, mu, sigma, xi)
    p1 = d1.shape[1]
    m1 = d1 @ beta_theta[:p1] if p1 else np.zeros(ds.k)
    m2 = d2 @ beta_theta[p1:] if d2.shape[1] else np.zeros(ds.k)
    return m1, m2


def predict_site(
    trace: Trace,
    data: Dataset,
    spec: ModelSpec,
    query: QuerySites,
    rng: np.random.Generator,
    max_sigma_redraws: int = 100,
) -> PredictionDraws:
    """Posterior-predictive draws of (mu, sigma, xi, theta) at query sites.

    Per retained iteration: each GEV field at a query site is drawn from its
    scalar kriging conditional given the k latent values (exact interpolation
    at an observed site: zero conditional variance, no nugget).  sigma draws
    are redrawn until positive (then clamped as a last resort).  The angle is
    a fresh-event draw from the site's bivariate marginal N(m_theta, T).
    """
    _validate_query(spec, query)
    t_draws = trace.n_draws
    m = query.m
    qds = query.as_dataset()
    fields = {layer: trace.vector(layer) for layer in LAYERS}
    betas = {layer: trace.vector(f"beta_{layer}") for layer in LAYERS}
    taus = {layer: trace.column(f"tau_{layer}") for layer in LAYERS}
    lams = {layer: trace.column(f"lambda_{layer}") for layer in LAYERS}

    def kappa_series(layer):
        cov = getattr(spec, f"cov_{layer}")
        if cov.sample_kappa:
            return trace.column(f"kappa_{layer}")
        return np.full(t_draws, cov.kappa)

    kappas = {layer: kappa_series(layer) for layer in LAYERS}
    designs_obs = {layer: design_matrix(getattr(spec, f"{layer}_terms"), data) for layer in LAYERS}
    designs_q = {layer: design_matrix(getattr(spec, f"{layer}_terms"), qds) for layer in LAYERS}
    cross_d = np.linalg.norm(query.coords[:, None, :] - data.coords[None, :, :], axis=2)

    out = {layer: np.empty((t_draws, m)) for layer in LAYERS}
    if spec.has_angular:
        beta_theta = trace.vector("beta_theta") if spec.n_beta("theta") else np.zeros((t_draws, 0))
        tau_th = trace.column("tau_theta")
        rho_th = trace.column("rho_theta")
        theta_out = np.empty((t_draws, m))
    else:
        theta_out = None

    for t in range(t_draws):
        for layer in LAYERS:
            lam, kap, tau = lams[layer][t], kappas[layer][t], taus[layer][t]
            corr = SpdMatrix(corr_matrix(data.coords, lam, kap))
            cvec = np.exp(-((cross_d / lam) ** kap))  # (m, k) correlation to data sites
            field = fields[layer][t]
            m_obs = designs_obs[layer] @ betas[layer][t] if betas[layer].shape[1] else 0.0
            m_q = designs_q[layer] @ betas[layer][t] if betas[layer].shape[1] else np.zeros(m)
            w = corr.solve(field - m_obs)
            cond_mean = m_q + cvec @ w
            sol = corr.solve(cvec.T)  # (k, m)
            cond_var = tau * np.maximum(1.0 - np.einsum("mk,km->m", cvec, sol), 0.0)
            sd = np.sqrt(cond_var)
            draw = cond_mean + sd * rng.standard_normal(m)
            if layer == "sigma":
                bad = draw <= 0.0
                tries = 0
                while np.any(bad) and tries < max_sigma_redraws:
                    draw[bad] = cond_mean[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
                    bad = draw <= 0.0
                    tries += 1
                draw[bad] = 1e-6
            out[layer][t] = draw
        if spec.has_angular:
            m1, m2 = _theta_mean_at(
                spec, qds, beta_theta[t], out["mu"][t], out["sigma"][t], out["xi"][t]
            )
            t_block, _, _ = _t_block_parts(tau_th[t], rho_th[t])
            chol = np.linalg.cholesky(t_block)
            z = rng.standard_normal((m, 2)) @ chol.T
            x1 = m1 + z[:, 0]
            x2 = m2 + z[:, 1]
            theta_out[t] = angle_from_xy(x1, x2)

    return PredictionDraws(
        site_ids=list(query.site_ids),
        mu=out["mu"],
        sigma=out["sigma"],
        xi=out["xi"],
        theta=theta_out,
    )


def return_level(draws: PredictionDraws, p: float, ci: float = 0.95) -> ReturnLevelSummary:
    """Posterior summary of the GEV quantile q(p) at each query site: the
    quantile is applied per iteration, then summarized empirically."""
    if not (0.0 < p < 1.0):
        raise ValidationError(f"return-level probability must lie in (0, 1), got {p}")
    rl = gev_quantile_parts(p, draws.mu, draws.sigma, draws.xi)
    lo_q, hi_q = 50.0 * (1.0 - ci), 50.0 * (1.0 + ci)
    return ReturnLevelSummary(
        prob=p,
        median=np.median(rl, axis=0),
        lo=np.percentile(rl, lo_q, axis=0),
        hi=np.percentile(rl, hi_q, axis=0),
    )


def _wrapped_kde(angles: np.ndarray, grid: np.ndarray, bw: float) -> np.ndarray:
    """Wrapped-Gaussian kernel density estimate on the circle."""
    diff = np.mod(grid[:, None] - angles[None, :] + np.pi, TWO_PI) - np.pi
    dens = np.zeros(grid.size)
    for w in (-1.0, 0.0, 1.0):
        dens += np.exp(-0.5 * ((diff + w * TWO_PI) / bw) ** 2).sum(axis=1)
    return dens / (angles.size * bw * math.sqrt(2.0 * math.pi))


def circular_summary(angles, grid_size: int = 720, mode_frac: float = 0.1) -> CircularSummary:
    """Circular dispersion sqrt(-2 log Rbar) plus KDE-based posterior mode(s).

    Modes are local maxima of a wrapped-Gaussian KDE exceeding ``mode_frac``
    of the global maximum; the main mode is the highest-density one.  A zero
    mean resultant length yields an infinite dispersion sentinel.
    """
    angles = np.asarray(angles, dtype=float)
    angles = angles[np.isfinite(angles)]
    if angles.size == 0:
        raise ValidationError("circular_summary needs at least one angle")
    cbar = float(np.mean(np.cos(angles)))
    sbar = float(np.mean(np.sin(angles)))
    rbar = math.hypot(cbar, sbar)
    dispersion = math.inf if rbar <= 1e-15 else math.sqrt(max(-2.0 * math.log(rbar), 0.0))

    # plug-in bandwidth from the circular sd, bounded to keep the KDE usable
    # when draws are nearly antipodal (rbar ~ 0) or nearly degenerate
    sd_c = min(dispersion, 0.5 * math.pi) if math.isfinite(dispersion) else 0.5 * math.pi
    bw = max(sd_c * (4.0 / (3.0 * angles.size)) ** 0.2, 1.5 * TWO_PI / grid_size)

    grid = np.arange(grid_size) * TWO_PI / grid_size
    dens = _wrapped_kde(angles, grid, bw)
    prev = np.roll(dens, 1)
    nxt = np.roll(dens, -1)
    peaks = (dens > prev) & (dens >= nxt) & (dens >= mode_frac * dens.max())
    n_modes = max(int(np.count_nonzero(peaks)), 1)
    mode = float(grid[int(np.argmax(dens))])
    return CircularSummary(mode=mode, dispersion=dispersion, n_modes=n_modes)


class _StreamingWaic:
    """Single-pass lppd and p_waic over iterations via an online logsumexp
    and Welford variance, one slot per data point."""

    def __init__(self, n_points: int):
        self.max = np.full(n_points, -np.inf)
        self.sumexp = np.zeros(n_points)
        self.count = 0
        self.mean = np.zeros(n_points)
        self.m2 = np.zeros(n_points)

    def add(self, ll: np.ndarray) -> None:
        bigger = ll > self.max
        safe_old = np.where(np.isfinite(self.max), self.max, ll)
        self.sumexp = np.where(
            bigger,
            self.sumexp * np.exp(np.where(bigger, safe_old - ll, 0.0)) + 1.0,
            self.sumexp + np.exp(ll - self.max),
        )
        self.max = np.maximum(self.max, ll)
        self.count += 1
        delta = ll - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (ll - self.mean)

    def lppd(self) -> float:
        return float(np.sum(self.max + np.log(self.sumexp) - math.log(self.count)))

    def p_waic(self) -> float:
        return float(np.sum(self.m2 / (self.count - 1)))


def waic(trace: Trace, data: Dataset, spec: ModelSpec) -> WaicReport:
    """Widely applicable information criterion, decomposed into the GEV and
    angular blocks: WAIC_block = -2 (lppd - p_waic), total = sum.

    The angular pointwise likelihood is the single-site marginal angular
    density (radius integrated out) at that site's bivariate marginal.
    """
    if trace.n_draws < 2:
        raise ValidationError("WAIC needs at least 2 retained iterations")
    eta_mask = data.eta_mask
    theta_mask = data.theta_mask if spec.has_angular else np.zeros_like(eta_mask)
    eta_obs = data.eta[eta_mask]

    mu_t = trace.vector("mu")
    sg_t = trace.vector("sigma")
    xi_t = trace.vector("xi")

    eta_acc = _StreamingWaic(int(eta_mask.sum()))
    th_acc = _StreamingWaic(int(theta_mask.sum())) if spec.has_angular else None
    if spec.has_angular:
        beta_theta = trace.vector("beta_theta") if spec.n_beta("theta") else np.zeros((trace.n_draws, 0))
        tau_th = trace.column("tau_theta")
        rho_th = trace.column("rho_theta")
        th_obs_cols = [np.flatnonzero(theta_mask[:, j]) for j in range(data.k)]

    cols = [np.flatnonzero(eta_mask[:, j]) for j in range(data.k)]
    for t in range(trace.n_draws):
        ll_eta = np.concatenate(
            [
                gev_logpdf_parts(data.eta[cols[j], j], mu_t[t, j], sg_t[t, j], xi_t[t, j])
                for j in range(data.k)
            ]
        ) if eta_obs.size else np.zeros(0)
        eta_acc.add(ll_eta)
        if spec.has_angular:
            m1, m2 = _theta_mean_at(spec, data, beta_theta[t], mu_t[t], sg_t[t], xi_t[t])
            t_block, _, _ = _t_block_parts(tau_th[t], rho_th[t])
            ll_th = np.concatenate(
                [
                    _pn_loglik_terms(
                        np.cos(data.theta[th_obs_cols[j], j]),
                        np.sin(data.theta[th_obs_cols[j], j]),
                        m1[j],
                        m2[j],
                        t_block,
                    )
                    for j in range(data.k)
                ]
            )
            th_acc.add(ll_th)

    lppd_eta, p_eta = eta_acc.lppd(), eta_acc.p_waic()
    waic_eta = -2.0 * (lppd_eta - p_eta)
    if spec.has_angular:
        lppd_th, p_th = th_acc.lppd(), th_acc.p_waic()
        waic_th = -2.0 * (lppd_th - p_th)
    else:
        lppd_th = p_th = waic_th = 0.0
    return WaicReport(
        waic_theta=waic_th,
        waic_eta=waic_eta,
        waic_total=waic_th + waic_eta,
        lppd_theta=lppd_th,
        lppd_eta=lppd_eta,
        p_waic_theta=p_th,
        p_waic_eta=p_eta,
    )
