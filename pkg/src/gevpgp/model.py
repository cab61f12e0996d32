"""Model specification: datasets, formula terms, design matrices and priors.

Mean functions are linear in structured term lists rather than parsed
formula strings.  GEV-layer means may use only site covariates; the angular
mean components may additionally use the latent GEV fields themselves
(``gev`` terms) or GEV quantiles (``quantile`` terms), which is what couples
directions to extreme magnitudes.  Angular design matrices therefore have to
be rebuilt whenever a referenced GEV field changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError, ValidationError
from .extremes import gev_quantile_parts

__all__ = [
    "Term",
    "CovSpec",
    "ModelSpec",
    "Dataset",
    "GaussianPrior",
    "InvGammaPrior",
    "GammaPrior",
    "Priors",
    "McmcSettings",
    "term_values",
    "design_matrix",
]

_GEV_FIELDS = ("mu", "sigma", "xi")


@dataclass(frozen=True)
class Term:
    """One additive term of a mean function.

    kind: 'intercept' | 'covariate' | 'gev' | 'quantile'
    name: covariate column for 'covariate'; one of mu/sigma/xi for 'gev'
    prob: quantile order for 'quantile' terms
    """

    kind: str
    name: str | None = None
    prob: float | None = None

    def __post_init__(self):
        if self.kind == "intercept":
            pass
        elif self.kind == "covariate":
            if not self.name:
                raise ValidationError("covariate term needs a name")
        elif self.kind == "gev":
            if self.name not in _GEV_FIELDS:
                raise ValidationError(f"gev term must name one of {_GEV_FIELDS}, got {self.name!r}")
        elif self.kind == "quantile":
            if self.prob is None or not (0.0 < self.prob < 1.0):
                raise ValidationError(f"quantile term needs prob in (0, 1), got {self.prob}")
        else:
            raise ValidationError(f"unknown term kind {self.kind!r}")

    @property
    def uses_gev(self) -> bool:
        return self.kind in ("gev", "quantile")

    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "covariate":
            return self.name
        if self.kind == "gev":
            return self.name
        return f"q({self.prob:g})"

    @staticmethod
    def intercept() -> "Term":
        return Term("intercept")

    @staticmethod
    def covariate(name: str) -> "Term":
        return Term("covariate", name=name)

    @staticmethod
    def gev(name: str) -> "Term":
        return Term("gev", name=name)

    @staticmethod
    def quantile(prob: float) -> "Term":
        return Term("quantile", prob=prob)

    def to_dict(self) -> dict:
        d = {"type": self.kind}
        if self.name is not None:
            d["name"] = self.name
        if self.prob is not None:
            d["prob"] = self.prob
        return d

    @staticmethod
    def from_dict(d: dict) -> "Term":
        if not isinstance(d, dict) or "type" not in d:
            raise ValidationError(f"malformed term {d!r}: expected an object with a 'type' key")
        return Term(d["type"], name=d.get("name"), prob=d.get("prob"))


@dataclass(frozen=True)
class CovSpec:
    """Covariance-family settings for one layer (powered exponential only)."""

    family: str = "powered_exponential"
    kappa: float = 1.0
    sample_kappa: bool = False

    def __post_init__(self):
        if self.family != "powered_exponential":
            raise ValidationError(f"unsupported covariance family {self.family!r}")
        if not (0.0 < self.kappa <= 2.0):
            raise ParameterError(f"kappa must be in (0, 2], got {self.kappa}")


@dataclass(frozen=True)
class ModelSpec:
    """Mean-function terms and covariance settings for every layer.

    theta1_terms/theta2_terms are None for a GEV-only model (no angular
    layer); an empty list means that component's mean is identically zero.
    """

    mu_terms: tuple[Term, ...]
    sigma_terms: tuple[Term, ...]
    xi_terms: tuple[Term, ...]
    theta1_terms: tuple[Term, ...] | None = (Term.intercept(),)
    theta2_terms: tuple[Term, ...] | None = (Term.intercept(),)
    cov_mu: CovSpec = CovSpec()
    cov_sigma: CovSpec = CovSpec()
    cov_xi: CovSpec = CovSpec()
    cov_theta: CovSpec = CovSpec()

    def __post_init__(self):
        for layer in ("mu", "sigma", "xi"):
            terms = getattr(self, f"{layer}_terms")
            object.__setattr__(self, f"{layer}_terms", tuple(terms))
            for t in terms:
                if t.uses_gev:
                    raise ValidationError(
                        f"term {t.label()!r} not allowed in the {layer} mean: "
                        "GEV-derived terms may appear only in angular formulas"
                    )
            if len(terms) == 0:
                raise ValidationError(f"the {layer} mean needs at least one term")
        if (self.theta1_terms is None) != (self.theta2_terms is None):
            raise ValidationError("theta1/theta2 terms must both be set or both be None")
        for attr in ("theta1_terms", "theta2_terms"):
            terms = getattr(self, attr)
            if terms is not None:
                object.__setattr__(self, attr, tuple(terms))

    @property
    def has_angular(self) -> bool:
        return self.theta1_terms is not None

    def angular_gev_deps(self) -> frozenset[str]:
        """Which GEV fields the angular mean references (quantiles use all)."""
        deps: set[str] = set()
        for t in (self.theta1_terms or ()) + (self.theta2_terms or ()):
            if t.kind == "gev":
                deps.add(t.name)
            elif t.kind == "quantile":
                deps.update(_GEV_FIELDS)
        return frozenset(deps)

    def n_beta(self, layer: str) -> int:
        if layer == "theta":
            return len(self.theta1_terms or ()) + len(self.theta2_terms or ())
        return len(getattr(self, f"{layer}_terms"))

    def validate_against(self, covariates: dict) -> None:
        for attr in ("mu_terms", "sigma_terms", "xi_terms", "theta1_terms", "theta2_terms"):
            for t in getattr(self, attr) or ():
                if t.kind == "covariate" and t.name not in covariates:
                    raise ValidationError(
                        f"unknown formula term {t.name!r}: dataset provides "
                        f"{sorted(covariates)}"
                    )

    def to_dict(self) -> dict:
        def terms(ts):
            return None if ts is None else [t.to_dict() for t in ts]

        def cov(c: CovSpec):
            return {"family": c.family, "kappa": c.kappa, "sample_kappa": c.sample_kappa}

        return {
            "mu": terms(self.mu_terms),
            "sigma": terms(self.sigma_terms),
            "xi": terms(self.xi_terms),
            "theta1": terms(self.theta1_terms),
            "theta2": terms(self.theta2_terms),
            "cov_mu": cov(self.cov_mu),
            "cov_sigma": cov(self.cov_sigma),
            "cov_xi": cov(self.cov_xi),
            "cov_theta": cov(self.cov_theta),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        def terms(key, allow_none=False):
            v = d.get(key)
            if v is None:
                if allow_none:
                    return None
                raise ValidationError(f"model spec is missing the {key!r} term list")
            return tuple(Term.from_dict(t) for t in v)

        def cov(key):
            v = d.get(key, {})
            return CovSpec(
                family=v.get("family", "powered_exponential"),
                kappa=float(v.get("kappa", 1.0)),
                sample_kappa=bool(v.get("sample_kappa", False)),
            )

        return ModelSpec(
            mu_terms=terms("mu"),
            sigma_terms=terms("sigma"),
            xi_terms=terms("xi"),
            theta1_terms=terms("theta1", allow_none=True),
            theta2_terms=terms("theta2", allow_none=True),
            cov_mu=cov("cov_mu"),
            cov_sigma=cov("cov_sigma"),
            cov_xi=cov("cov_xi"),
            cov_theta=cov("cov_theta"),
        )


@dataclass
class Dataset:
    """k sites with n replicates of (block maximum, angle) each.

    eta/theta are (n, k) with NaN marking missing entries; theta is radians
    in [0, 2*pi).  Covariates are per-site vectors keyed by name.
    """

    station_ids: list[str]
    coords: np.ndarray
    covariates: dict[str, np.ndarray]
    years: np.ndarray
    eta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.years = np.asarray(self.years)
        k = self.coords.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValidationError(f"coords must be (k, 2), got {self.coords.shape}")
        if len(self.station_ids) != k:
            raise ValidationError("station_ids length must match coords")
        if self.eta.shape != self.theta.shape or self.eta.ndim != 2 or self.eta.shape[1] != k:
            raise ValidationError(
                f"eta/theta must be (n, k) with k={k}, got {self.eta.shape}/{self.theta.shape}"
            )
        if self.eta.shape[0] != self.years.size:
            raise ValidationError("years length must match the replicate dimension")
        self.covariates = {k_: np.asarray(v, dtype=float) for k_, v in self.covariates.items()}
        for name, v in self.covariates.items():
            if v.shape != (k,):
                raise ValidationError(f"covariate {name!r} must have shape ({k},)")
        th = self.theta[np.isfinite(self.theta)]
        if th.size and (th.min() < 0.0 or th.max() >= 2.0 * np.pi):
            raise ValidationError("theta values must lie in [0, 2*pi)")

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.eta.shape[0]

    @property
    def eta_mask(self) -> np.ndarray:
        """(n, k) boolean, True where the maximum is observed."""
        return np.isfinite(self.eta)

    @property
    def theta_mask(self) -> np.ndarray:
        return np.isfinite(self.theta)


def term_values(term: Term, data: Dataset, mu=None, sigma=None, xi=None) -> np.ndarray:
    """Per-site values of one term, given the current GEV fields."""
    k = data.k
    if term.kind == "intercept":
        return np.ones(k)
    if term.kind == "covariate":
        try:
            return data.covariates[term.name]
        except KeyError:
            raise ValidationError(f"unknown formula term {term.name!r}") from None
    fields = {"mu": mu, "sigma": sigma, "xi": xi}
    if term.kind == "gev":
        v = fields[term.name]
        if v is None:
            raise ValidationError(f"term {term.label()!r} needs the current GEV fields")
        return np.asarray(v, dtype=float)
    if any(v is None for v in fields.values()):
        raise ValidationError(f"term {term.label()!r} needs the current GEV fields")
    return gev_quantile_parts(term.prob, fields["mu"], fields["sigma"], fields["xi"])


def design_matrix(terms, data: Dataset, mu=None, sigma=None, xi=None) -> np.ndarray:
    """(k, p) design matrix for a term list; p may be zero."""
    k = data.k
    cols = [term_values(t, data, mu, sigma, xi) for t in terms]
    if not cols:
        return np.zeros((k, 0))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# priors and MCMC settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise ParameterError("Gaussian prior mean/cov dimensions disagree")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @staticmethod
    def iso(dim: int, mean: float = 0.0, var: float = 100.0) -> "GaussianPrior":
        return GaussianPrior(np.full(dim, mean), var * np.eye(dim))


@dataclass(frozen=True)
class InvGammaPrior:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0.0 and self.scale > 0.0):
            raise ParameterError("inverse gamma prior needs shape > 0 and scale > 0")


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0.0 and self.scale > 0.0):
            raise ParameterError("gamma prior needs shape > 0 and scale > 0")


@dataclass(frozen=True)
class Priors:
    """Prior settings per block; rho_theta is uniform on (-1, 1) throughout."""

    beta_mu: GaussianPrior
    beta_sigma: GaussianPrior
    beta_xi: GaussianPrior
    beta_theta: GaussianPrior | None
    sill_mu: InvGammaPrior = InvGammaPrior(2.0, 1.0)
    sill_sigma: InvGammaPrior = InvGammaPrior(2.0, 1.0)
    sill_xi: InvGammaPrior = InvGammaPrior(2.0, 1.0)
    range_mu: GammaPrior = GammaPrior(2.0, 1.0)
    range_sigma: GammaPrior = GammaPrior(2.0, 1.0)
    range_xi: GammaPrior = GammaPrior(2.0, 1.0)
    tau_theta: GammaPrior = GammaPrior(2.0, 1.0)
    lambda_theta: GammaPrior = GammaPrior(2.0, 1.0)
    kappa_mu: GammaPrior = GammaPrior(2.0, 0.5)
    kappa_sigma: GammaPrior = GammaPrior(2.0, 0.5)
    kappa_xi: GammaPrior = GammaPrior(2.0, 0.5)
    kappa_theta: GammaPrior = GammaPrior(2.0, 0.5)

    @staticmethod
    def default(spec: ModelSpec, beta_var: float = 100.0) -> "Priors":
        return Priors(
            beta_mu=GaussianPrior.iso(spec.n_beta("mu"), var=beta_var),
            beta_sigma=GaussianPrior.iso(spec.n_beta("sigma"), var=beta_var),
            beta_xi=GaussianPrior.iso(spec.n_beta("xi"), var=beta_var),
            beta_theta=(
                GaussianPrior.iso(spec.n_beta("theta"), var=beta_var)
                if spec.has_angular
                else None
            ),
        )

    def validate_against(self, spec: ModelSpec) -> None:
        for layer in ("mu", "sigma", "xi"):
            if getattr(self, f"beta_{layer}").mean.size != spec.n_beta(layer):
                raise ValidationError(f"beta_{layer} prior dimension does not match the spec")
        if spec.has_angular:
            if self.beta_theta is None or self.beta_theta.mean.size != spec.n_beta("theta"):
                raise ValidationError("beta_theta prior dimension does not match the spec")

    def to_dict(self) -> dict:
        def g(p):
            return None if p is None else {"mean": p.mean.tolist(), "cov": p.cov.tolist()}

        def sp(p):
            return {"shape": p.shape, "scale": p.scale}

        return {
            "beta_mu": g(self.beta_mu),
            "beta_sigma": g(self.beta_sigma),
            "beta_xi": g(self.beta_xi),
            "beta_theta": g(self.beta_theta),
            "sill_mu": sp(self.sill_mu),
            "sill_sigma": sp(self.sill_sigma),
            "sill_xi": sp(self.sill_xi),
            "range_mu": sp(self.range_mu),
            "range_sigma": sp(self.range_sigma),
            "range_xi": sp(self.range_xi),
            "tau_theta": sp(self.tau_theta),
            "lambda_theta": sp(self.lambda_theta),
            "kappa_mu": sp(self.kappa_mu),
            "kappa_sigma": sp(self.kappa_sigma),
            "kappa_xi": sp(self.kappa_xi),
            "kappa_theta": sp(self.kappa_theta),
        }

    @staticmethod
    def from_dict(d: dict) -> "Priors":
        def g(v):
            return None if v is None else GaussianPrior(np.asarray(v["mean"]), np.asarray(v["cov"]))

        def ig(v, default):
            return default if v is None else InvGammaPrior(float(v["shape"]), float(v["scale"]))

        def ga(v, default):
            return default if v is None else GammaPrior(float(v["shape"]), float(v["scale"]))

        return Priors(
            beta_mu=g(d["beta_mu"]),
            beta_sigma=g(d["beta_sigma"]),
            beta_xi=g(d["beta_xi"]),
            beta_theta=g(d.get("beta_theta")),
            sill_mu=ig(d.get("sill_mu"), InvGammaPrior(2.0, 1.0)),
            sill_sigma=ig(d.get("sill_sigma"), InvGammaPrior(2.0, 1.0)),
            sill_xi=ig(d.get("sill_xi"), InvGammaPrior(2.0, 1.0)),
            range_mu=ga(d.get("range_mu"), GammaPrior(2.0, 1.0)),
            range_sigma=ga(d.get("range_sigma"), GammaPrior(2.0, 1.0)),
            range_xi=ga(d.get("range_xi"), GammaPrior(2.0, 1.0)),
            tau_theta=ga(d.get("tau_theta"), GammaPrior(2.0, 1.0)),
            lambda_theta=ga(d.get("lambda_theta"), GammaPrior(2.0, 1.0)),
            kappa_mu=ga(d.get("kappa_mu"), GammaPrior(2.0, 0.5)),
            kappa_sigma=ga(d.get("kappa_sigma"), GammaPrior(2.0, 0.5)),
            kappa_xi=ga(d.get("kappa_xi"), GammaPrior(2.0, 0.5)),
            kappa_theta=ga(d.get("kappa_theta"), GammaPrior(2.0, 0.5)),
        )


@dataclass(frozen=True)
class McmcSettings:
    n_iter: int
    burnin: int
    thin: int = 1
    seed: int = 0
    n_chains: int = 1

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValidationError("n_iter must be >= 1")
        if not (0 <= self.burnin < self.n_iter):
            raise ValidationError("burnin must satisfy 0 <= burnin < n_iter")
        if self.thin < 1 or self.n_chains < 1:
            raise ValidationError("thin and n_chains must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter,
            "burnin": self.burnin,
            "thin": self.thin,
            "seed": self.seed,
            "n_chains": self.n_chains,
        }
