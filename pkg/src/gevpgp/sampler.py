"""Data-augmented Metropolis-within-Gibbs sampler.

One transition applies, in order:

  1. single-site random-walk updates of each GEV field (mu, sigma, xi);
     acceptance combines the site's GEV likelihood ratio, the augmented
     angular likelihood ratio over replicates (whenever the angular mean
     references the field) and the GP prior ratio;
  2. log-normal random-walk updates of every latent radius, one site at a
     time, vectorized over replicates (independent given everything else);
     missing angles get an exact bivariate Gaussian imputation;
  3. an exact conjugate draw of the angular regression coefficients;
  4. exact conjugate draws of the GEV regression coefficients;
  5. exact inverse-gamma draws of the GEV sills;
  6. Metropolis updates of the angular covariance (tau_theta, lambda_theta,
     rho_theta, optionally kappa_theta);
  7. Metropolis updates of the GEV ranges (and optionally shapes).

All acceptance probabilities are computed in log space.  A workspace object
caches precision matrices and residual products so one full transition costs
O(n k^2 + k^3); the caches are refreshed from canonical state periodically
to stop floating-point drift.  A proposal whose covariance cannot be
factorized within the jitter budget is rejected rather than fatal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import linalg as sla

from .errors import SingularityError, ValidationError
from .extremes import GevParams, fit_gev_pwm, gev_logpdf_parts, gev_quantile_parts, gev_sample
from .model import Dataset, GammaPrior, McmcSettings, ModelSpec, Priors, design_matrix
from .numerics import SpdMatrix, corr_matrix, inverse_gamma_sample, lognormal_step
from .pgp import TWO_PI, angle_from_xy
from .trace import Trace, state_columns, state_row

__all__ = [
    "LAYERS",
    "ChainState",
    "TuningState",
    "init_state",
    "sample_prior_state",
    "regenerate_data",
    "update_gev_site",
    "update_radius",
    "update_beta_theta",
    "update_beta_gev",
    "update_sill_gev",
    "update_angular_cov",
    "update_range_gev",
    "gibbs_step",
    "run_chain",
]

LAYERS = ("mu", "sigma", "xi")
_REFRESH_EVERY = 100


@dataclass
class ChainState:
    """One Gibbs iterate: latent radii/angles, GEV fields, hyperparameters.

    ``angles`` equals the observed angles except at missing entries, where it
    carries the latent imputation.  Angular entries are None for a GEV-only
    model.
    """

    radii: np.ndarray | None
    angles: np.ndarray | None
    mu: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    beta_mu: np.ndarray
    beta_sigma: np.ndarray
    beta_xi: np.ndarray
    beta_theta: np.ndarray | None
    tau_mu: float
    tau_sigma: float
    tau_xi: float
    lam_mu: float
    lam_sigma: float
    lam_xi: float
    kappa_mu: float = 1.0
    kappa_sigma: float = 1.0
    kappa_xi: float = 1.0
    tau_theta: float | None = None
    rho_theta: float | None = None
    lam_theta: float | None = None
    kappa_theta: float | None = None

    def copy(self) -> "ChainState":
        def arr(a):
            return None if a is None else np.array(a, dtype=float)

        return ChainState(
            radii=arr(self.radii),
            angles=arr(self.angles),
            mu=arr(self.mu),
            sigma=arr(self.sigma),
            xi=arr(self.xi),
            beta_mu=arr(self.beta_mu),
            beta_sigma=arr(self.beta_sigma),
            beta_xi=arr(self.beta_xi),
            beta_theta=arr(self.beta_theta),
            tau_mu=self.tau_mu,
            tau_sigma=self.tau_sigma,
            tau_xi=self.tau_xi,
            lam_mu=self.lam_mu,
            lam_sigma=self.lam_sigma,
            lam_xi=self.lam_xi,
            kappa_mu=self.kappa_mu,
            kappa_sigma=self.kappa_sigma,
            kappa_xi=self.kappa_xi,
            tau_theta=self.tau_theta,
            rho_theta=self.rho_theta,
            lam_theta=self.lam_theta,
            kappa_theta=self.kappa_theta,
        )

    def gev_field(self, layer: str) -> np.ndarray:
        return getattr(self, layer)


@dataclass
class TuningState:
    """Random-walk scales per Metropolis block, adapted during burn-in.

    Robbins-Monro scaling towards a 0.44 acceptance rate; ``adapting`` is
    frozen (set False) once burn-in ends so the post-burn-in kernel is a
    fixed Markov transition.
    """

    gev_steps: np.ndarray  # (3, k), rows ordered like LAYERS
    radius_steps: np.ndarray  # (k,)
    range_steps: dict
    kappa_steps: dict
    tau_theta_step: float = 0.3
    lambda_theta_step: float = 0.3
    kappa_theta_step: float = 0.3
    rho_eps: float = 0.2
    target: float = 0.44
    adapting: bool = True
    counters: dict = dc_field(default_factory=dict)

    @staticmethod
    def default(data: Dataset, spec: ModelSpec) -> "TuningState":
        pooled = np.nanstd(data.eta)
        if not np.isfinite(pooled) or pooled <= 0:
            pooled = 1.0
        k = data.k
        gev = np.vstack(
            [
                np.full(k, 0.3 * pooled / math.sqrt(max(data.n, 1))),
                np.full(k, 0.2 * pooled / math.sqrt(max(data.n, 1))),
                np.full(k, 0.08),
            ]
        )
        return TuningState(
            gev_steps=np.maximum(gev, 1e-3),
            radius_steps=np.full(k, 0.4),
            range_steps={layer: 0.3 for layer in LAYERS},
            kappa_steps={layer: 0.2 for layer in LAYERS},
        )

    def _gain(self, key) -> float:
        c = self.counters.get(key, 0) + 1
        self.counters[key] = c
        return c ** -0.6

    def adapt_gev(self, li: int, j: int, alpha: float) -> None:
        if self.adapting:
            g = self._gain(("gev", li, j))
            self.gev_steps[li, j] = float(
                np.clip(self.gev_steps[li, j] * math.exp(g * (alpha - self.target)), 1e-8, 1e3)
            )

    def adapt_radius(self, j: int, alpha: float) -> None:
        if self.adapting:
            g = self._gain(("radius", j))
            self.radius_steps[j] = float(
                np.clip(self.radius_steps[j] * math.exp(g * (alpha - self.target)), 1e-8, 1e3)
            )

    def adapt_scalar(self, key: str, alpha: float, lo=1e-8, hi=1e3) -> None:
        if not self.adapting:
            return
        g = self._gain(key)
        fac = math.exp(g * (alpha - self.target))
        if key in self.range_steps:
            self.range_steps[key] = float(np.clip(self.range_steps[key] * fac, lo, hi))
        elif key in self.kappa_steps:
            self.kappa_steps[key] = float(np.clip(self.kappa_steps[key] * fac, lo, hi))
        elif key == "rho":
            self.rho_eps = float(np.clip(self.rho_eps * fac, 1e-6, 1.8))
        else:
            cur = getattr(self, key + "_step")
            setattr(self, key + "_step", float(np.clip(cur * fac, lo, hi)))


# ---------------------------------------------------------------------------
# workspace: cached quantities for one chain
# ---------------------------------------------------------------------------


class _GevLayer:
    __slots__ = (
        "name",
        "field",
        "beta",
        "tau",
        "lam",
        "kappa",
        "d",
        "prior_prec",
        "prior_prec_mean",
        "corr_logdet",
        "corr_inv",
        "q",
        "m",
        "e",
        "qe",
    )

    def __init__(self, name):
        self.name = name

    def rebuild_corr(self, sites):
        c = SpdMatrix(corr_matrix(sites, self.lam, self.kappa))
        self.corr_logdet = c.logdet()
        self.corr_inv = c.inverse()
        self.q = self.corr_inv / self.tau

    def rebuild_residual(self):
        self.m = self.d @ self.beta if self.beta.size else np.zeros(self.field.size)
        self.e = self.field - self.m
        self.qe = self.q @ self.e

    def sigma_logdet(self) -> float:
        return self.field.size * math.log(self.tau) + self.corr_logdet

    def quad(self) -> float:
        """Current residual quadratic form e' Sigma^{-1} e."""
        return float(self.e @ self.qe)


def _t_block_parts(tau: float, rho: float):
    off = rho * math.sqrt(tau)
    t = np.array([[tau, off], [off, 1.0]])
    det = tau * (1.0 - rho * rho)
    tinv = np.array([[1.0, -off], [-off, tau]]) / det
    return t, tinv, det


class _Workspace:
    """All caches for one chain; canonical state lives in fields/radii/angles
    plus the scalar hyperparameters, everything else is derived."""

    def __init__(self, data: Dataset, spec: ModelSpec, priors: Priors):
        spec.validate_against(data.covariates)
        priors.validate_against(spec)
        self.data = data
        self.spec = spec
        self.priors = priors
        self.k = data.k
        self.n = data.n
        self.sites = data.coords
        self.has_angular = spec.has_angular
        self.angular_deps = spec.angular_gev_deps()
        self.eta_obs = [data.eta[data.eta_mask[:, j], j] for j in range(data.k)]
        self.theta_missing = [
            np.flatnonzero(~data.theta_mask[:, j]) for j in range(data.k)
        ]
        self.theta_observed = [
            np.flatnonzero(data.theta_mask[:, j]) for j in range(data.k)
        ]
        if self.has_angular:
            p1 = len(spec.theta1_terms)
            self._theta_split = p1
        self.accept_stats: dict = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def from_state(cls, data, spec, priors, state: ChainState) -> "_Workspace":
        ws = cls(data, spec, priors)
        ws.layers = {}
        for name in LAYERS:
            lw = _GevLayer(name)
            lw.field = np.array(state.gev_field(name), dtype=float)
            lw.beta = np.array(getattr(state, f"beta_{name}"), dtype=float)
            lw.tau = float(getattr(state, f"tau_{name}"))
            lw.lam = float(getattr(state, f"lam_{name}"))
            lw.kappa = float(getattr(state, f"kappa_{name}"))
            lw.d = design_matrix(getattr(spec, f"{name}_terms"), data)
            prior = getattr(priors, f"beta_{name}")
            lw.prior_prec = np.linalg.inv(prior.cov) if prior.mean.size else np.zeros((0, 0))
            lw.prior_prec_mean = lw.prior_prec @ prior.mean
            lw.rebuild_corr(ws.sites)
            lw.rebuild_residual()
            ws.layers[name] = lw
        if np.any(ws.layers["sigma"].field <= 0.0):
            raise ValidationError("initial sigma field must be positive everywhere")
        ws.gev_sitell = np.array(
            [
                float(
                    np.sum(
                        gev_logpdf_parts(
                            ws.eta_obs[j],
                            ws.layers["mu"].field[j],
                            ws.layers["sigma"].field[j],
                            ws.layers["xi"].field[j],
                        )
                    )
                )
                for j in range(ws.k)
            ]
        )
        if not np.all(np.isfinite(ws.gev_sitell)):
            raise ValidationError("some observation lies outside GEV support at the initial state")

        if ws.has_angular:
            if state.radii is None or state.angles is None or state.beta_theta is None:
                raise ValidationError("angular model requires radii, angles and beta_theta")
            ws.radii = np.array(state.radii, dtype=float)
            ws.angles = np.array(state.angles, dtype=float)
            obs = ws.data.theta_mask
            if not np.allclose(
                ws.angles[obs], ws.data.theta[obs], rtol=0.0, atol=1e-12
            ):
                raise ValidationError("state angles disagree with observed angles")
            if np.any(ws.radii <= 0.0):
                raise ValidationError("radii must be positive")
            ws.beta_theta = np.array(state.beta_theta, dtype=float)
            ws.tau_theta = float(state.tau_theta)
            ws.rho_theta = float(state.rho_theta)
            ws.lam_theta = float(state.lam_theta)
            ws.kappa_theta = float(state.kappa_theta)
            prior = priors.beta_theta
            ws.prior_prec_theta = (
                np.linalg.inv(prior.cov) if prior.mean.size else np.zeros((0, 0))
            )
            ws.prior_prec_mean_theta = ws.prior_prec_theta @ prior.mean
            ws._rebuild_angular_cov()
            ws._refresh_x()
            ws._rebuild_angular_mean()
        return ws

    def _rebuild_angular_cov(self):
        c = SpdMatrix(corr_matrix(self.sites, self.lam_theta, self.kappa_theta))
        _, tinv, det = _t_block_parts(self.tau_theta, self.rho_theta)
        self.corr_theta_logdet = c.logdet()
        self.corr_theta_inv = c.inverse()
        self.q_theta = np.kron(tinv, self.corr_theta_inv)
        self.logdet_theta = self.k * math.log(det) + 2.0 * self.corr_theta_logdet

    def _refresh_x(self):
        self.x = np.concatenate(
            [self.radii * np.cos(self.angles), self.radii * np.sin(self.angles)], axis=1
        )

    def angular_design(self) -> np.ndarray:
        mu, sg, xh = (self.layers[n].field for n in LAYERS)
        d1 = design_matrix(self.spec.theta1_terms, self.data, mu, sg, xh)
        d2 = design_matrix(self.spec.theta2_terms, self.data, mu, sg, xh)
        top = np.hstack([d1, np.zeros((self.k, d2.shape[1]))])
        bot = np.hstack([np.zeros((self.k, d1.shape[1])), d2])
        return np.vstack([top, bot])

    def _rebuild_angular_mean(self):
        d = self.angular_design()
        self.m_theta = d @ self.beta_theta if self.beta_theta.size else np.zeros(2 * self.k)
        self.e_theta = self.x - self.m_theta
        self.qe_theta = self.e_theta @ self.q_theta

    def angular_mean_site(self, j: int, mu_j: float, sigma_j: float, xi_j: float):
        """Angular mean components at site j for the given GEV values."""

        def comp(terms, beta):
            total = 0.0
            for t, b in zip(terms, beta):
                if t.kind == "intercept":
                    total += b
                elif t.kind == "covariate":
                    total += b * self.data.covariates[t.name][j]
                elif t.kind == "gev":
                    total += b * {"mu": mu_j, "sigma": sigma_j, "xi": xi_j}[t.name]
                else:
                    total += b * float(gev_quantile_parts(t.prob, mu_j, sigma_j, xi_j))
            return total

        p1 = self._theta_split
        return (
            comp(self.spec.theta1_terms, self.beta_theta[:p1]),
            comp(self.spec.theta2_terms, self.beta_theta[p1:]),
        )

    def full_refresh(self):
        for lw in self.layers.values():
            lw.rebuild_corr(self.sites)
            lw.rebuild_residual()
        if self.has_angular:
            self._rebuild_angular_cov()
            self._refresh_x()
            self._rebuild_angular_mean()

    # -- bookkeeping ---------------------------------------------------------

    def stat(self, key: str, alpha: float):
        s = self.accept_stats.setdefault(key, [0.0, 0])
        s[0] += alpha
        s[1] += 1

    def acceptance_rates(self) -> dict:
        return {k: (s[0] / s[1] if s[1] else float("nan")) for k, s in self.accept_stats.items()}

    def snapshot(self) -> ChainState:
        ang = self.has_angular
        return ChainState(
            radii=self.radii.copy() if ang else None,
            angles=self.angles.copy() if ang else None,
            mu=self.layers["mu"].field.copy(),
            sigma=self.layers["sigma"].field.copy(),
            xi=self.layers["xi"].field.copy(),
            beta_mu=self.layers["mu"].beta.copy(),
            beta_sigma=self.layers["sigma"].beta.copy(),
            beta_xi=self.layers["xi"].beta.copy(),
            beta_theta=self.beta_theta.copy() if ang else None,
            tau_mu=self.layers["mu"].tau,
            tau_sigma=self.layers["sigma"].tau,
            tau_xi=self.layers["xi"].tau,
            lam_mu=self.layers["mu"].lam,
            lam_sigma=self.layers["sigma"].lam,
            lam_xi=self.layers["xi"].lam,
            kappa_mu=self.layers["mu"].kappa,
            kappa_sigma=self.layers["sigma"].kappa,
            kappa_xi=self.layers["xi"].kappa,
            tau_theta=self.tau_theta if ang else None,
            rho_theta=self.rho_theta if ang else None,
            lam_theta=self.lam_theta if ang else None,
            kappa_theta=self.kappa_theta if ang else None,
        )


# ---------------------------------------------------------------------------
# step kernels (operate on a workspace, return realized acceptance prob)
# ---------------------------------------------------------------------------


def _finite_or_reject(log_alpha: float) -> float:
    """Acceptance probability from a log ratio; non-finite ratios reject."""
    if not np.isfinite(log_alpha):
        return 0.0 if log_alpha != np.inf else 1.0
    return math.exp(min(0.0, log_alpha))


def _step1_site(ws: _Workspace, layer: str, j: int, rng, tuning: TuningState) -> float:
    li = LAYERS.index(layer)
    lw = ws.layers[layer]
    cur = lw.field[j]
    prop = cur + tuning.gev_steps[li, j] * rng.standard_normal()

    if layer == "sigma" and prop <= 0.0:
        tuning.adapt_gev(li, j, 0.0)
        ws.stat(f"gev_{layer}", 0.0)
        return 0.0

    vals = {"mu": ws.layers["mu"].field[j], "sigma": ws.layers["sigma"].field[j], "xi": ws.layers["xi"].field[j]}
    vals[layer] = prop
    new_ll = float(np.sum(gev_logpdf_parts(ws.eta_obs[j], vals["mu"], vals["sigma"], vals["xi"])))
    log_r1 = new_ll - ws.gev_sitell[j]

    delta = prop - cur
    log_r3 = -(delta * lw.qe[j] + 0.5 * delta * delta * lw.q[j, j])

    log_r2 = 0.0
    dm1 = dm2 = 0.0
    touches_angular = ws.has_angular and layer in ws.angular_deps
    if touches_angular:
        m1_new, m2_new = ws.angular_mean_site(j, vals["mu"], vals["sigma"], vals["xi"])
        kq = ws.k + j
        dm1 = m1_new - ws.m_theta[j]
        dm2 = m2_new - ws.m_theta[kq]
        quad = (
            dm1 * dm1 * ws.q_theta[j, j]
            + 2.0 * dm1 * dm2 * ws.q_theta[j, kq]
            + dm2 * dm2 * ws.q_theta[kq, kq]
        )
        log_r2 = (
            dm1 * float(np.sum(ws.qe_theta[:, j]))
            + dm2 * float(np.sum(ws.qe_theta[:, kq]))
            - 0.5 * ws.n * quad
        )

    alpha = _finite_or_reject(log_r1 + log_r2 + log_r3)
    if alpha > 0.0 and rng.uniform() < alpha:
        lw.field[j] = prop
        lw.e[j] += delta
        lw.qe += delta * lw.q[:, j]
        ws.gev_sitell[j] = new_ll
        if touches_angular:
            kq = ws.k + j
            ws.m_theta[j] += dm1
            ws.m_theta[kq] += dm2
            ws.e_theta[:, j] -= dm1
            ws.e_theta[:, kq] -= dm2
            ws.qe_theta -= dm1 * ws.q_theta[j] + dm2 * ws.q_theta[kq]
    tuning.adapt_gev(li, j, alpha)
    ws.stat(f"gev_{layer}", alpha)
    return alpha


def _step2_site(ws: _Workspace, j: int, rng, tuning: TuningState, replicates=None) -> float:
    """Log-normal MH on the radii of site j, vectorized over replicates with
    an observed angle.  Acceptance is the joint-density ratio (Gaussian part
    plus the radius Jacobian) plus the log-normal Hastings correction."""
    reps = ws.theta_observed[j] if replicates is None else np.asarray(replicates)
    if reps.size == 0:
        return float("nan")
    k = ws.k
    kq = k + j
    step = tuning.radius_steps[j]
    z = rng.standard_normal(reps.size)
    u = rng.uniform(size=reps.size)

    r_cur = ws.radii[reps, j]
    r_prop = r_cur * np.exp(step * z)
    ct = np.cos(ws.angles[reps, j])
    st = np.sin(ws.angles[reps, j])
    dc = (r_prop - r_cur) * ct
    ds = (r_prop - r_cur) * st
    quad = (
        dc * dc * ws.q_theta[j, j]
        + 2.0 * dc * ds * ws.q_theta[j, kq]
        + ds * ds * ws.q_theta[kq, kq]
    )
    dlog = -(dc * ws.qe_theta[reps, j] + ds * ws.qe_theta[reps, kq]) - 0.5 * quad
    log_alpha = dlog + 2.0 * step * z  # Jacobian + Hastings, each log(r_prop/r_cur)
    alpha = np.exp(np.minimum(0.0, log_alpha))
    alpha[~np.isfinite(log_alpha)] = 0.0
    acc = u < alpha
    if np.any(acc):
        idx = reps[acc]
        ws.radii[idx, j] = r_prop[acc]
        ws.x[idx, j] += dc[acc]
        ws.x[idx, kq] += ds[acc]
        ws.e_theta[idx, j] += dc[acc]
        ws.e_theta[idx, kq] += ds[acc]
        ws.qe_theta[idx] += dc[acc, None] * ws.q_theta[j] + ds[acc, None] * ws.q_theta[kq]
    mean_alpha = float(np.mean(alpha))
    tuning.adapt_radius(j, mean_alpha)
    ws.stat("radius", mean_alpha)
    return mean_alpha


def _impute_angles_site(ws: _Workspace, j: int, rng) -> None:
    """Exact Gibbs draw of the latent (X1, X2) at site j for replicates with
    a missing angle, from the bivariate Gaussian conditional given the rest."""
    mis = ws.theta_missing[j]
    if mis.size == 0:
        return
    k = ws.k
    b = np.array([j, k + j])
    qbb = ws.q_theta[np.ix_(b, b)]
    det = qbb[0, 0] * qbb[1, 1] - qbb[0, 1] * qbb[1, 0]
    s = np.array([[qbb[1, 1], -qbb[0, 1]], [-qbb[1, 0], qbb[0, 0]]]) / det  # Qbb^{-1}
    l11 = math.sqrt(s[0, 0])
    l21 = s[1, 0] / l11
    l22 = math.sqrt(max(s[1, 1] - l21 * l21, 0.0))
    chol = np.array([[l11, 0.0], [l21, l22]])

    xb = ws.x[np.ix_(mis, b)]
    cond_mean = xb - ws.qe_theta[np.ix_(mis, b)] @ s
    xb_new = cond_mean + rng.standard_normal((mis.size, 2)) @ chol.T
    dx = xb_new - xb

    ws.x[mis, j] = xb_new[:, 0]
    ws.x[mis, k + j] = xb_new[:, 1]
    ws.e_theta[mis, j] += dx[:, 0]
    ws.e_theta[mis, k + j] += dx[:, 1]
    ws.qe_theta[mis] += dx[:, 0:1] * ws.q_theta[j] + dx[:, 1:2] * ws.q_theta[k + j]
    ws.radii[mis, j] = np.hypot(xb_new[:, 0], xb_new[:, 1])
    ws.angles[mis, j] = angle_from_xy(xb_new[:, 0], xb_new[:, 1])


def _spd_chol_cached(a: np.ndarray) -> np.ndarray:
    return SpdMatrix(a).chol


def _beta_theta_conjugate_params(ws: _Workspace):
    """Posterior (mean, cov) of beta_theta given the augmented data."""
    d = ws.angular_design()
    qd = ws.q_theta @ d
    a = ws.prior_prec_theta + ws.n * d.T @ qd
    b = ws.prior_prec_mean_theta + qd.T @ ws.x.sum(axis=0)
    a_spd = SpdMatrix(a)
    mean = a_spd.solve(b)
    return mean, a_spd, d


def _step3_beta_theta(ws: _Workspace, rng) -> None:
    if ws.beta_theta.size == 0:
        return
    ws._refresh_x()
    mean, a_spd, d = _beta_theta_conjugate_params(ws)
    z = rng.standard_normal(mean.size)
    ws.beta_theta = mean + sla.solve_triangular(a_spd.chol, z, lower=True, trans="T")
    ws.m_theta = d @ ws.beta_theta
    ws.e_theta = ws.x - ws.m_theta
    ws.qe_theta = ws.e_theta @ ws.q_theta


def _beta_gev_conjugate_params(ws: _Workspace, layer: str):
    lw = ws.layers[layer]
    qd = lw.q @ lw.d
    a = lw.prior_prec + lw.d.T @ qd
    b = lw.prior_prec_mean + qd.T @ lw.field
    a_spd = SpdMatrix(a)
    return a_spd.solve(b), a_spd


def _step4_beta_gev(ws: _Workspace, layer: str, rng) -> None:
    lw = ws.layers[layer]
    if lw.beta.size == 0:
        return
    mean, a_spd = _beta_gev_conjugate_params(ws, layer)
    z = rng.standard_normal(mean.size)
    lw.beta = mean + sla.solve_triangular(a_spd.chol, z, lower=True, trans="T")
    lw.rebuild_residual()


def _sill_conjugate_params(ws: _Workspace, layer: str):
    """Shape and rate of the inverse-gamma full conditional of the sill.

    The rate uses the unit-sill correlation quadratic form e' C^{-1} e, i.e.
    the sill inside Sigma = tau * C is factored out and cancelled.
    """
    lw = ws.layers[layer]
    prior = getattr(ws.priors, f"sill_{layer}")
    quad_corr = lw.tau * lw.quad()  # e' C^{-1} e
    return 0.5 * ws.k + prior.shape, prior.scale + 0.5 * quad_corr


def _step5_sill(ws: _Workspace, layer: str, rng) -> None:
    lw = ws.layers[layer]
    shape, rate = _sill_conjugate_params(ws, layer)
    tau_new = inverse_gamma_sample(shape, rate, rng)
    scale = lw.tau / tau_new
    lw.q = lw.q * scale
    lw.qe = lw.qe * scale
    lw.tau = tau_new


def _gamma_log_ratio(prior: GammaPrior, prop: float, cur: float) -> float:
    return (prior.shape - 1.0) * math.log(prop / cur) - (prop - cur) / prior.scale


def _angular_cov_log_ratio(ws: _Workspace, tau, rho, lam, kappa):
    """Log of the n-replicate Gaussian likelihood ratio for proposed angular
    covariance parameters, plus the proposed (q, logdet) on success.
    Returns None when the proposal is not factorizable (reject)."""
    try:
        c = SpdMatrix(corr_matrix(ws.sites, lam, kappa))
        cinv = c.inverse()
        clogdet = c.logdet()
    except SingularityError:
        return None
    _, tinv, det = _t_block_parts(tau, rho)
    q_p = np.kron(tinv, cinv)
    logdet_p = ws.k * math.log(det) + 2.0 * clogdet
    quad_p = float(np.sum((ws.e_theta @ q_p) * ws.e_theta))
    quad_c = float(np.sum(ws.qe_theta * ws.e_theta))
    log_lik = 0.5 * ws.n * (ws.logdet_theta - logdet_p) - 0.5 * (quad_p - quad_c)
    return log_lik, q_p, logdet_p, cinv, clogdet


def _step6_angular_cov(ws: _Workspace, rng, tuning: TuningState) -> None:
    # tau_theta: log-normal proposal, Gamma prior, correction tau_p/tau
    prop, corr = lognormal_step(ws.tau_theta, tuning.tau_theta_step, rng)
    out = _angular_cov_log_ratio(ws, prop, ws.rho_theta, ws.lam_theta, ws.kappa_theta)
    if out is None:
        alpha = 0.0
    else:
        log_lik, q_p, logdet_p, cinv, clogdet = out
        log_alpha = log_lik + _gamma_log_ratio(ws.priors.tau_theta, prop, ws.tau_theta) + corr
        alpha = _finite_or_reject(log_alpha)
    if alpha > 0.0 and rng.uniform() < alpha:
        ws.tau_theta = prop
        ws.q_theta, ws.logdet_theta = q_p, logdet_p
        ws.corr_theta_inv, ws.corr_theta_logdet = cinv, clogdet
        ws.qe_theta = ws.e_theta @ ws.q_theta
    tuning.adapt_scalar("tau_theta", alpha)
    ws.stat("tau_theta", alpha)

    # lambda_theta: same scheme
    prop, corr = lognormal_step(ws.lam_theta, tuning.lambda_theta_step, rng)
    out = _angular_cov_log_ratio(ws, ws.tau_theta, ws.rho_theta, prop, ws.kappa_theta)
    if out is None:
        alpha = 0.0
    else:
        log_lik, q_p, logdet_p, cinv, clogdet = out
        log_alpha = log_lik + _gamma_log_ratio(ws.priors.lambda_theta, prop, ws.lam_theta) + corr
        alpha = _finite_or_reject(log_alpha)
    if alpha > 0.0 and rng.uniform() < alpha:
        ws.lam_theta = prop
        ws.q_theta, ws.logdet_theta = q_p, logdet_p
        ws.corr_theta_inv, ws.corr_theta_logdet = cinv, clogdet
        ws.qe_theta = ws.e_theta @ ws.q_theta
    tuning.adapt_scalar("lambda_theta", alpha)
    ws.stat("lambda_theta", alpha)

    # rho_theta: symmetric uniform window, no correction; out-of-domain rejects
    prop = ws.rho_theta + rng.uniform(-tuning.rho_eps, tuning.rho_eps)
    if abs(prop) >= 1.0:
        alpha = 0.0
    else:
        out = _angular_cov_log_ratio(ws, ws.tau_theta, prop, ws.lam_theta, ws.kappa_theta)
        if out is None:
            alpha = 0.0
        else:
            log_lik, q_p, logdet_p, cinv, clogdet = out
            alpha = _finite_or_reject(log_lik)
    if alpha > 0.0 and rng.uniform() < alpha:
        ws.rho_theta = prop
        ws.q_theta, ws.logdet_theta = q_p, logdet_p
        ws.corr_theta_inv, ws.corr_theta_logdet = cinv, clogdet
        ws.qe_theta = ws.e_theta @ ws.q_theta
    tuning.adapt_scalar("rho", alpha)
    ws.stat("rho_theta", alpha)

    if ws.spec.cov_theta.sample_kappa:
        prop, corr = lognormal_step(ws.kappa_theta, tuning.kappa_theta_step, rng)
        if prop > 2.0:
            alpha = 0.0
        else:
            out = _angular_cov_log_ratio(ws, ws.tau_theta, ws.rho_theta, ws.lam_theta, prop)
            if out is None:
                alpha = 0.0
            else:
                log_lik, q_p, logdet_p, cinv, clogdet = out
                log_alpha = (
                    log_lik + _gamma_log_ratio(ws.priors.kappa_theta, prop, ws.kappa_theta) + corr
                )
                alpha = _finite_or_reject(log_alpha)
        if alpha > 0.0 and rng.uniform() < alpha:
            ws.kappa_theta = prop
            ws.q_theta, ws.logdet_theta = q_p, logdet_p
            ws.corr_theta_inv, ws.corr_theta_logdet = cinv, clogdet
            ws.qe_theta = ws.e_theta @ ws.q_theta
        tuning.adapt_scalar("kappa_theta", alpha)
        ws.stat("kappa_theta", alpha)


def _range_log_alpha(ws: _Workspace, layer: str, lam_p: float, kappa_p: float | None = None):
    """Step-7 log acceptance ratio for a proposed range (or shape): Gaussian
    prior-field ratio, Gamma prior ratio and the log-normal correction.
    Returns (log_alpha_without_correction, new corr parts) or None."""
    lw = ws.layers[layer]
    kap = lw.kappa if kappa_p is None else kappa_p
    try:
        c = SpdMatrix(corr_matrix(ws.sites, lam_p, kap))
        cinv = c.inverse()
        clogdet = c.logdet()
    except SingularityError:
        return None
    q_p = cinv / lw.tau
    quad_p = float(lw.e @ (q_p @ lw.e))
    logdet_p = ws.k * math.log(lw.tau) + clogdet
    log_lik = 0.5 * (lw.sigma_logdet() - logdet_p) - 0.5 * (quad_p - lw.quad())
    return log_lik, q_p, cinv, clogdet


def _step7_range(ws: _Workspace, layer: str, rng, tuning: TuningState) -> None:
    lw = ws.layers[layer]
    prop, corr = lognormal_step(lw.lam, tuning.range_steps[layer], rng)
    out = _range_log_alpha(ws, layer, prop)
    if out is None:
        alpha = 0.0
    else:
        log_lik, q_p, cinv, clogdet = out
        prior = getattr(ws.priors, f"range_{layer}")
        alpha = _finite_or_reject(log_lik + _gamma_log_ratio(prior, prop, lw.lam) + corr)
    if alpha > 0.0 and rng.uniform() < alpha:
        lw.lam = prop
        lw.q, lw.corr_inv, lw.corr_logdet = q_p, cinv, clogdet
        lw.qe = lw.q @ lw.e
    tuning.adapt_scalar(layer, alpha)
    ws.stat(f"lambda_{layer}", alpha)

    if getattr(ws.spec, f"cov_{layer}").sample_kappa:
        prop, corr = lognormal_step(lw.kappa, tuning.kappa_steps[layer], rng)
        if prop > 2.0:
            alpha = 0.0
        else:
            out = _range_log_alpha(ws, layer, lw.lam, kappa_p=prop)
            if out is None:
                alpha = 0.0
            else:
                log_lik, q_p, cinv, clogdet = out
                prior = getattr(ws.priors, f"kappa_{layer}")
                alpha = _finite_or_reject(log_lik + _gamma_log_ratio(prior, prop, lw.kappa) + corr)
        if alpha > 0.0 and rng.uniform() < alpha:
            lw.kappa = prop
            lw.q, lw.corr_inv, lw.corr_logdet = q_p, cinv, clogdet
            lw.qe = lw.q @ lw.e
        tuning.adapt_scalar(layer, alpha)
        ws.stat(f"kappa_{layer}", alpha)


def _gibbs_step_ws(ws: _Workspace, rng, tuning: TuningState) -> None:
    # Step 1: GEV fields, site by site, layer by layer
    for layer in LAYERS:
        for j in range(ws.k):
            _step1_site(ws, layer, j, rng, tuning)
    if ws.has_angular:
        # Step 2: radii (and exact imputation of missing angles)
        for j in range(ws.k):
            _step2_site(ws, j, rng, tuning)
            _impute_angles_site(ws, j, rng)
        # Step 3: angular regression coefficients
        _step3_beta_theta(ws, rng)
    # Step 4: GEV regression coefficients
    for layer in LAYERS:
        _step4_beta_gev(ws, layer, rng)
    # Step 5: sills
    for layer in LAYERS:
        _step5_sill(ws, layer, rng)
    # Step 6: angular covariance parameters
    if ws.has_angular:
        _step6_angular_cov(ws, rng, tuning)
    # Step 7: ranges (and optional shapes)
    for layer in LAYERS:
        _step7_range(ws, layer, rng, tuning)


# ---------------------------------------------------------------------------
# public single-step operations
# ---------------------------------------------------------------------------


def update_gev_site(state, data, spec, priors, layer, j, rng, tuning=None) -> ChainState:
    """One Metropolis update of the GEV ``layer`` field at site ``j``."""
    ws = _Workspace.from_state(data, spec, priors, state)
    tuning = tuning or TuningState.default(data, spec)
    _step1_site(ws, layer, j, rng, tuning)
    return ws.snapshot()


def update_radius(state, data, spec, priors, i, j, rng, tuning=None) -> ChainState:
    """One log-normal Metropolis update of the radius at replicate i, site j."""
    ws = _Workspace.from_state(data, spec, priors, state)
    tuning = tuning or TuningState.default(data, spec)
    _step2_site(ws, j, rng, tuning, replicates=np.array([i]))
    return ws.snapshot()


def update_beta_theta(state, data, spec, priors, rng) -> ChainState:
    """Exact conjugate draw of the angular regression coefficients."""
    ws = _Workspace.from_state(data, spec, priors, state)
    _step3_beta_theta(ws, rng)
    return ws.snapshot()


def update_beta_gev(state, data, spec, priors, layer, rng) -> ChainState:
    ws = _Workspace.from_state(data, spec, priors, state)
    _step4_beta_gev(ws, layer, rng)
    return ws.snapshot()


def update_sill_gev(state, data, spec, priors, layer, rng) -> ChainState:
    ws = _Workspace.from_state(data, spec, priors, state)
    _step5_sill(ws, layer, rng)
    return ws.snapshot()


def update_angular_cov(state, data, spec, priors, rng, tuning=None) -> ChainState:
    ws = _Workspace.from_state(data, spec, priors, state)
    tuning = tuning or TuningState.default(data, spec)
    _step6_angular_cov(ws, rng, tuning)
    return ws.snapshot()


def update_range_gev(state, data, spec, priors, layer, rng, tuning=None) -> ChainState:
    ws = _Workspace.from_state(data, spec, priors, state)
    tuning = tuning or TuningState.default(data, spec)
    _step7_range(ws, layer, rng, tuning)
    return ws.snapshot()


def gibbs_step(state, data, spec, priors, tuning, rng) -> ChainState:
    """One full transition (Steps 1-7) from a bare state."""
    ws = _Workspace.from_state(data, spec, priors, state)
    _gibbs_step_ws(ws, rng, tuning)
    return ws.snapshot()


# ---------------------------------------------------------------------------
# initialization and prior simulation
# ---------------------------------------------------------------------------


def _gp_chol(sites, tau, lam, kappa) -> np.ndarray:
    return math.sqrt(tau) * SpdMatrix(corr_matrix(sites, lam, kappa)).chol


def init_state(data: Dataset, spec: ModelSpec, priors: Priors, rng) -> ChainState:
    """Cheap, robust starting point: probability-weighted-moment GEV fits per
    site (shape clamped to [-0.5, 0.5]), unit radii, least-squares regression
    coefficients, prior-median sills/ranges."""
    from scipy import stats as sps

    spec.validate_against(data.covariates)
    priors.validate_against(spec)
    pooled = data.eta[np.isfinite(data.eta)]
    if pooled.size < 3:
        raise ValidationError("need at least 3 observed maxima to initialize")
    pooled_fit = fit_gev_pwm(pooled)
    mu0 = np.empty(data.k)
    sg0 = np.empty(data.k)
    xi0 = np.empty(data.k)
    for j in range(data.k):
        col = data.eta[data.eta_mask[:, j], j]
        p = fit_gev_pwm(col) if col.size >= 3 else pooled_fit
        if col.size and np.any(~np.isfinite(gev_logpdf_parts(col, p.mu, p.sigma, p.xi))):
            p = GevParams(p.mu, p.sigma, 0.0)
        mu0[j], sg0[j], xi0[j] = p.mu, p.sigma, p.xi

    def ols(terms, field):
        d = design_matrix(terms, data)
        if d.shape[1] == 0:
            return np.zeros(0)
        coef, *_ = np.linalg.lstsq(d, field, rcond=None)
        return coef

    ig_median = lambda p: float(sps.invgamma(p.shape, scale=p.scale).median())
    ga_median = lambda p: float(sps.gamma(p.shape, scale=p.scale).median())

    state = ChainState(
        radii=None,
        angles=None,
        mu=mu0,
        sigma=sg0,
        xi=xi0,
        beta_mu=ols(spec.mu_terms, mu0),
        beta_sigma=ols(spec.sigma_terms, sg0),
        beta_xi=ols(spec.xi_terms, xi0),
        beta_theta=None,
        tau_mu=ig_median(priors.sill_mu),
        tau_sigma=ig_median(priors.sill_sigma),
        tau_xi=ig_median(priors.sill_xi),
        lam_mu=ga_median(priors.range_mu),
        lam_sigma=ga_median(priors.range_sigma),
        lam_xi=ga_median(priors.range_xi),
        kappa_mu=spec.cov_mu.kappa,
        kappa_sigma=spec.cov_sigma.kappa,
        kappa_xi=spec.cov_xi.kappa,
    )
    if spec.has_angular:
        angles = np.array(data.theta, dtype=float)
        missing = ~data.theta_mask
        if np.any(missing):
            angles[missing] = rng.uniform(0.0, TWO_PI, size=int(missing.sum()))
        radii = np.ones_like(angles)
        state.radii = radii
        state.angles = angles
        state.tau_theta = ga_median(priors.tau_theta)
        state.rho_theta = 0.0
        state.lam_theta = ga_median(priors.lambda_theta)
        state.kappa_theta = spec.cov_theta.kappa
        d1 = design_matrix(spec.theta1_terms, data, mu0, sg0, xi0)
        d2 = design_matrix(spec.theta2_terms, data, mu0, sg0, xi0)
        xbar = np.mean(radii * np.cos(angles), axis=0)
        ybar = np.mean(radii * np.sin(angles), axis=0)
        b1, *_ = np.linalg.lstsq(d1, xbar, rcond=None) if d1.shape[1] else (np.zeros(0),)
        b2, *_ = np.linalg.lstsq(d2, ybar, rcond=None) if d2.shape[1] else (np.zeros(0),)
        state.beta_theta = np.concatenate([b1, b2])
    return state


def sample_prior_state(
    data: Dataset, spec: ModelSpec, priors: Priors, rng, max_sigma_redraws: int = 100
) -> ChainState:
    """Draw a complete state from the hierarchical prior (hyperparameters,
    GP fields, augmented angular latents).  The sigma field is redrawn until
    positive everywhere, matching the sampler's support rejection."""
    from scipy import stats as sps

    def beta_draw(prior):
        if prior.mean.size == 0:
            return np.zeros(0)
        return prior.mean + SpdMatrix(prior.cov).chol @ rng.standard_normal(prior.mean.size)

    taus = {
        layer: inverse_gamma_sample(
            getattr(priors, f"sill_{layer}").shape, getattr(priors, f"sill_{layer}").scale, rng
        )
        for layer in LAYERS
    }
    lams = {
        layer: float(
            sps.gamma(
                getattr(priors, f"range_{layer}").shape,
                scale=getattr(priors, f"range_{layer}").scale,
            ).ppf(rng.uniform())
        )
        for layer in LAYERS
    }
    betas = {layer: beta_draw(getattr(priors, f"beta_{layer}")) for layer in LAYERS}

    fields = {}
    for layer in LAYERS:
        d = design_matrix(getattr(spec, f"{layer}_terms"), data)
        m = d @ betas[layer] if betas[layer].size else np.zeros(data.k)
        chol = _gp_chol(data.coords, taus[layer], lams[layer], getattr(spec, f"cov_{layer}").kappa)
        if layer == "sigma":
            for _ in range(max_sigma_redraws):
                f = m + chol @ rng.standard_normal(data.k)
                if np.all(f > 0.0):
                    break
            else:
                raise ValidationError(
                    "could not draw a positive sigma field from the prior; "
                    "use priors that keep sigma away from zero"
                )
        else:
            f = m + chol @ rng.standard_normal(data.k)
        fields[layer] = f

    state = ChainState(
        radii=None,
        angles=None,
        mu=fields["mu"],
        sigma=fields["sigma"],
        xi=fields["xi"],
        beta_mu=betas["mu"],
        beta_sigma=betas["sigma"],
        beta_xi=betas["xi"],
        beta_theta=None,
        tau_mu=taus["mu"],
        tau_sigma=taus["sigma"],
        tau_xi=taus["xi"],
        lam_mu=lams["mu"],
        lam_sigma=lams["sigma"],
        lam_xi=lams["xi"],
        kappa_mu=spec.cov_mu.kappa,
        kappa_sigma=spec.cov_sigma.kappa,
        kappa_xi=spec.cov_xi.kappa,
    )
    if spec.has_angular:
        state.beta_theta = beta_draw(priors.beta_theta)
        state.tau_theta = float(
            sps.gamma(priors.tau_theta.shape, scale=priors.tau_theta.scale).ppf(rng.uniform())
        )
        state.lam_theta = float(
            sps.gamma(priors.lambda_theta.shape, scale=priors.lambda_theta.scale).ppf(rng.uniform())
        )
        state.rho_theta = float(rng.uniform(-1.0, 1.0))
        state.kappa_theta = spec.cov_theta.kappa
        d1 = design_matrix(spec.theta1_terms, data, *(fields[l] for l in LAYERS))
        d2 = design_matrix(spec.theta2_terms, data, *(fields[l] for l in LAYERS))
        p1 = d1.shape[1]
        m_theta = np.concatenate(
            [
                d1 @ state.beta_theta[:p1] if p1 else np.zeros(data.k),
                d2 @ state.beta_theta[p1:] if d2.shape[1] else np.zeros(data.k),
            ]
        )
        t, _, _ = _t_block_parts(state.tau_theta, state.rho_theta)
        c_chol = SpdMatrix(corr_matrix(data.coords, state.lam_theta, state.kappa_theta)).chol
        full_chol = np.kron(np.linalg.cholesky(t), c_chol)
        x = m_theta[None, :] + rng.standard_normal((data.n, 2 * data.k)) @ full_chol.T
        x1, x2 = x[:, : data.k], x[:, data.k:]
        state.radii = np.hypot(x1, x2)
        state.angles = angle_from_xy(x1, x2)
    return state


def regenerate_data(state: ChainState, data: Dataset, spec: ModelSpec, rng) -> tuple[Dataset, ChainState]:
    """Draw a fresh dataset from the model given ``state`` (maxima from the
    GEV layer, angles via the augmented bivariate Gaussian), returning the
    new dataset together with the state carrying the matching radii/angles.
    Used by prior-reproduction (Geweke-style) sampler checks."""
    n, k = data.n, data.k
    u = rng.uniform(size=(n, k))
    u[u == 0.0] = 0.5
    eta = gev_quantile_parts(u, state.mu, state.sigma, state.xi)
    new_state = state.copy()
    if spec.has_angular:
        d1 = design_matrix(spec.theta1_terms, data, state.mu, state.sigma, state.xi)
        d2 = design_matrix(spec.theta2_terms, data, state.mu, state.sigma, state.xi)
        p1 = d1.shape[1]
        m_theta = np.concatenate(
            [
                d1 @ state.beta_theta[:p1] if p1 else np.zeros(k),
                d2 @ state.beta_theta[p1:] if d2.shape[1] else np.zeros(k),
            ]
        )
        t, _, _ = _t_block_parts(state.tau_theta, state.rho_theta)
        c_chol = SpdMatrix(corr_matrix(data.coords, state.lam_theta, state.kappa_theta)).chol
        full_chol = np.kron(np.linalg.cholesky(t), c_chol)
        x = m_theta[None, :] + rng.standard_normal((n, 2 * k)) @ full_chol.T
        x1, x2 = x[:, :k], x[:, k:]
        theta = angle_from_xy(x1, x2)
        new_state.radii = np.hypot(x1, x2)
        new_state.angles = theta.copy()
    else:
        theta = np.full((n, k), np.nan)
    new_data = Dataset(
        station_ids=data.station_ids,
        coords=data.coords,
        covariates=data.covariates,
        years=data.years,
        eta=eta,
        theta=theta,
    )
    return new_data, new_state


# ---------------------------------------------------------------------------
# chain orchestration
# ---------------------------------------------------------------------------


def run_chain(
    data: Dataset,
    spec: ModelSpec,
    priors: Priors,
    settings: McmcSettings,
    init: ChainState | None = None,
    tuning: TuningState | None = None,
) -> list[Trace]:
    """Run ``settings.n_chains`` independent chains; deterministic given the
    seed.  Returns one Trace per chain (thinned, post-burn-in) with realized
    acceptance rates in each manifest."""
    streams = np.random.SeedSequence(settings.seed).spawn(settings.n_chains)
    traces = []
    cols = state_columns(spec, data.k)
    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        state0 = init.copy() if init is not None else init_state(data, spec, priors, rng)
        tun = (
            TuningState(
                gev_steps=tuning.gev_steps.copy(),
                radius_steps=tuning.radius_steps.copy(),
                range_steps=dict(tuning.range_steps),
                kappa_steps=dict(tuning.kappa_steps),
                tau_theta_step=tuning.tau_theta_step,
                lambda_theta_step=tuning.lambda_theta_step,
                kappa_theta_step=tuning.kappa_theta_step,
                rho_eps=tuning.rho_eps,
                target=tuning.target,
                adapting=tuning.adapting,
            )
            if tuning is not None
            else TuningState.default(data, spec)
        )
        ws = _Workspace.from_state(data, spec, priors, state0)
        rows = []
        for t in range(settings.n_iter):
            if t == settings.burnin:
                tun.adapting = False
                ws.accept_stats = {}
            _gibbs_step_ws(ws, rng, tun)
            if (t + 1) % _REFRESH_EVERY == 0:
                ws.full_refresh()
            if t >= settings.burnin and (t - settings.burnin) % settings.thin == 0:
                rows.append(state_row(ws.snapshot(), spec))
        manifest = {
            "model": spec.to_dict(),
            "priors": priors.to_dict(),
            "settings": settings.to_dict(),
            "chain_index": c,
            "columns": cols,
            "k": data.k,
            "n": data.n,
            "acceptance": ws.acceptance_rates(),
        }
        traces.append(
            Trace(
                columns=cols,
                values=np.array(rows),
                acceptance=ws.acceptance_rates(),
                manifest=manifest,
            )
        )
    return traces
