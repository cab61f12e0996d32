"""Trace container and CSV/JSON persistence.

One row per retained iteration; vector parameters expand to columns named
``param[index]``, scalar parameters keep their plain name.  A sidecar JSON
manifest records the model spec, priors, MCMC settings and realized
acceptance rates.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError

__all__ = ["Trace", "state_columns", "state_row"]

_SCALARS_GEV = (
    "tau_mu",
    "tau_sigma",
    "tau_xi",
    "lambda_mu",
    "lambda_sigma",
    "lambda_xi",
)
_SCALARS_ANGULAR = ("tau_theta", "rho_theta", "lambda_theta")


def state_columns(spec, k: int) -> list[str]:
    """Column layout for a trace under the given model spec and site count."""
    cols: list[str] = []
    for layer in ("mu", "sigma", "xi"):
        cols += [f"beta_{layer}[{i}]" for i in range(spec.n_beta(layer))]
    if spec.has_angular:
        cols += [f"beta_theta[{i}]" for i in range(spec.n_beta("theta"))]
    cols += list(_SCALARS_GEV)
    if spec.has_angular:
        cols += list(_SCALARS_ANGULAR)
    for layer in ("mu", "sigma", "xi"):
        if getattr(spec, f"cov_{layer}").sample_kappa:
            cols.append(f"kappa_{layer}")
    if spec.has_angular and spec.cov_theta.sample_kappa:
        cols.append("kappa_theta")
    for layer in ("mu", "sigma", "xi"):
        cols += [f"{layer}[{j}]" for j in range(k)]
    return cols


def state_row(state, spec) -> list[float]:
    """Serialize one ChainState into the state_columns layout (regression
    coefficients, covariance scalars, then the per-site GEV fields)."""
    row: list[float] = []
    for layer in ("mu", "sigma", "xi"):
        row += list(getattr(state, f"beta_{layer}"))
    if spec.has_angular:
        row += list(state.beta_theta)
    row += [state.tau_mu, state.tau_sigma, state.tau_xi, state.lam_mu, state.lam_sigma, state.lam_xi]
    if spec.has_angular:
        row += [state.tau_theta, state.rho_theta, state.lam_theta]
    for layer in ("mu", "sigma", "xi"):
        if getattr(spec, f"cov_{layer}").sample_kappa:
            row.append(getattr(state, f"kappa_{layer}"))
    if spec.has_angular and spec.cov_theta.sample_kappa:
        row.append(state.kappa_theta)
    row += list(state.mu) + list(state.sigma) + list(state.xi)
    return row


@dataclass
class Trace:
    """Retained draws of one chain, column-labelled."""

    columns: list[str]
    values: np.ndarray
    acceptance: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != len(self.columns):
            raise ValidationError(
                f"trace has {self.values.shape[1]} columns but {len(self.columns)} names"
            )
        self._index = {name: i for i, name in enumerate(self.columns)}

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self._index[name]]
        except KeyError:
            raise ValidationError(f"trace has no column {name!r}") from None

    def vector(self, prefix: str) -> np.ndarray:
        """(n_draws, m) matrix of columns ``prefix[0..m-1]`` in index order."""
        pat = re.compile(re.escape(prefix) + r"\[(\d+)\]$")
        found = sorted(
            ((int(m.group(1)), i) for name, i in self._index.items() if (m := pat.match(name))),
        )
        if not found:
            raise ValidationError(f"trace has no columns with prefix {prefix!r}")
        return self.values[:, [i for _, i in found]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=self.columns)

    def save(self, csv_path, manifest_path=None) -> None:
        csv_path = Path(csv_path)
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        if manifest_path is not None:
            payload = dict(self.manifest)
            payload.setdefault("columns", self.columns)
            payload["acceptance"] = self.acceptance
            Path(manifest_path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @staticmethod
    def load(csv_path, manifest_path=None) -> "Trace":
        frame = pd.read_csv(csv_path)
        manifest = {}
        if manifest_path is not None and Path(manifest_path).exists():
            manifest = json.loads(Path(manifest_path).read_text())
        return Trace(
            columns=list(frame.columns),
            values=frame.to_numpy(dtype=float),
            acceptance=manifest.get("acceptance", {}),
            manifest=manifest,
        )
