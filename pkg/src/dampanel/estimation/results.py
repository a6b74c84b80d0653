"""Fit containers and their JSON/CSV serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import DamParams, ModelSpec, split_params


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class FreqFit:
    """Point estimates with a sandwich covariance.

    ``spec`` is ``None`` for fits that are not a DAM (the IPW solver).
    Parameters held fixed during fitting have zero rows/columns in ``vcov``.
    """

    method: str
    param_names: tuple
    coef: np.ndarray
    vcov: np.ndarray
    convergence: dict
    spec: ModelSpec | None = None
    n_obs: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def params(self) -> DamParams:
        if self.spec is None:
            raise TypeError(f"{self.method} fit has no DAM parameters")
        return DamParams.from_vector(self.spec, self.coef)

    def named(self) -> dict[str, float]:
        return dict(zip(self.param_names, (float(v) for v in self.coef)))

    def index(self, name: str) -> int:
        return list(self.param_names).index(name)

    def draw_matrix(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Parametric draws from ``N(coef, vcov)``; scale parameters kept positive."""
        L = _psd_factor(self.vcov)
        Z = rng.standard_normal((n_draws, len(self.coef)))
        D = self.coef + Z @ L.T
        if self.spec is not None and self.spec.scale_name is not None:
            j = self.index(self.spec.scale_name)
            D[:, j] = np.maximum(D[:, j], 1e-12)
        return D

    def to_json_dict(self) -> dict:
        return {
            "kind": "freq",
            "method": self.method,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "spec_hash": None if self.spec is None else self.spec.spec_hash(),
            "param_names": list(self.param_names),
            "params": self.named(),
            "se": dict(zip(self.param_names, (float(v) for v in self.se))),
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "convergence": self.convergence,
            "n_obs": int(self.n_obs),
            "extra": self.extra,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FreqFit":
        names = tuple(d["param_names"])
        return cls(
            method=d["method"],
            param_names=names,
            coef=np.array([d["params"][n] for n in names], dtype=float),
            vcov=np.array(d["vcov"], dtype=float),
            convergence=d.get("convergence", {}),
            spec=None if d.get("spec") is None else ModelSpec.from_dict(d["spec"]),
            n_obs=d.get("n_obs", 0),
            extra=d.get("extra", {}),
        )


@dataclass
class PosteriorFit:
    """Retained post-burn-in draws, one row per draw."""

    param_names: tuple
    draws: np.ndarray
    spec: ModelSpec
    sampler_config: dict
    diagnostics: dict
    n_obs: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    @property
    def params(self) -> DamParams:
        """Posterior-mean parameters."""
        return DamParams.from_vector(self.spec, self.mean)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, list(self.param_names).index(name)]

    def blocks(self) -> dict:
        return split_params(self.spec, self.draws)

    def draw_matrix(self, n_draws=None, rng=None) -> np.ndarray:
        return self.draws

    def to_json_dict(self, draws_ref: str = "draws.csv") -> dict:
        return {
            "kind": "posterior",
            "method": "bayes",
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec.spec_hash(),
            "param_names": list(self.param_names),
            "draws_csv": draws_ref,
            "n_draws": int(self.draws.shape[0]),
            "posterior_mean": dict(zip(self.param_names, (float(v) for v in self.mean))),
            "posterior_sd": dict(zip(self.param_names, (float(v) for v in self.sd))),
            "sampler_config": self.sampler_config,
            "diagnostics": self.diagnostics,
            "n_obs": int(self.n_obs),
        }

    def write_draws_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.param_names)
            for row in self.draws:
                w.writerow([_fmt(v) for v in row])

    @classmethod
    def from_json_dict(cls, d: dict, base_dir=".") -> "PosteriorFit":
        names = tuple(d["param_names"])
        draws = read_draws_csv(Path(base_dir) / d["draws_csv"], names)
        return cls(
            param_names=names,
            draws=draws,
            spec=ModelSpec.from_dict(d["spec"]),
            sampler_config=d.get("sampler_config", {}),
            diagnostics=d.get("diagnostics", {}),
            n_obs=d.get("n_obs", 0),
        )


def read_draws_csv(path, names=None) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = tuple(rows[0])
    if names is not None and tuple(names) != header:
        raise ValueError(f"draws CSV header {header} does not match {tuple(names)}")
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def fit_from_json_dict(d: dict, base_dir="."):
    if d.get("kind") == "posterior":
        return PosteriorFit.from_json_dict(d, base_dir)
    return FreqFit.from_json_dict(d)


def _psd_factor(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    return U * np.sqrt(np.clip(w, 0, None))
