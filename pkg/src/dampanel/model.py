"""Debiased autoregressive models (linear and log-link).

Conditional mean for unit i at time t::

    lp = alpha + sum_b delta_b * (g(Y_{t-b}) - eta_{t-b}) + eta_t + gamma' X_t
    eta_s = sum_{p,z} theta_{p,z} A_{p,s-z} + sum_{p<q} zeta_{pq} A_{p,s} A_{q,s}

``g`` is the rate ``Y / P`` for the linear family and ``log((Y + c) / P)``
for the log-link family. The linear family predicts rates; the log-link
family predicts counts, ``exp(lp + log P_t)``.

Parameter vectors are laid out as ``alpha, delta_1..delta_k, effects,
gamma_*, scale`` where ``effects`` is ``theta`` (policy-major, lag-minor)
followed by the pairwise ``zeta`` terms and ``scale`` is ``sigma2`` (linear),
``dispersion`` (negative binomial) or absent (Poisson). See
:func:`param_names`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping

import numpy as np

from .errors import DataError, DomainError, SchemaError
from .panel import LagFrame, LagView, PanelDataset, lag_frame

FAMILIES = ("linear", "log_link")
COUNT_MODELS = ("negbin", "poisson")


@dataclass(frozen=True)
class ModelSpec:
    k: int = 1
    l: int = 0
    policies: tuple = ("treat",)
    include_interactions: bool = False
    covariates: tuple = ()
    family: str = "linear"
    log_shift: float = 1.0
    count_model: str = "negbin"

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(str(p) for p in self.policies))
        object.__setattr__(self, "covariates", tuple(str(c) for c in self.covariates))
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "l", int(self.l))
        object.__setattr__(self, "log_shift", float(self.log_shift))
        if self.k < 1 or self.l < 0:
            raise SchemaError(f"need k >= 1 and l >= 0, got k={self.k}, l={self.l}")
        if not self.policies:
            raise SchemaError("a model needs at least one policy")
        if len(set(self.policies)) != len(self.policies):
            raise SchemaError("duplicate policy names")
        if self.include_interactions and len(self.policies) < 2:
            raise SchemaError("interactions require at least two policies")
        if self.family not in FAMILIES:
            raise SchemaError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.count_model not in COUNT_MODELS:
            raise SchemaError(f"count_model must be one of {COUNT_MODELS}")
        if self.log_shift < 0:
            raise SchemaError("log_shift must be nonnegative")

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return list(combinations(self.policies, 2)) if self.include_interactions else []

    @property
    def n_theta(self) -> int:
        return len(self.policies) * (self.l + 1)

    @property
    def n_effects(self) -> int:
        return self.n_theta + len(self.pairs)

    @property
    def scale_name(self) -> str | None:
        if self.family == "linear":
            return "sigma2"
        return "dispersion" if self.count_model == "negbin" else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policies"] = list(self.policies)
        d["covariates"] = list(self.covariates)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown model keys: {sorted(extra)}")
        return cls(**dict(d))

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def effect_names(spec: ModelSpec) -> list[str]:
    names = []
    single = len(spec.policies) == 1
    for p in spec.policies:
        for z in range(spec.l + 1):
            names.append(f"theta_{z}" if single else f"theta_{p}_{z}")
    names += [f"zeta_{p}_{q}" for p, q in spec.pairs]
    return names


def param_names(spec: ModelSpec) -> list[str]:
    names = ["alpha"] + [f"delta_{b}" for b in range(1, spec.k + 1)]
    names += effect_names(spec)
    names += [f"gamma_{c}" for c in spec.covariates]
    if spec.scale_name:
        names.append(spec.scale_name)
    return names


def param_slices(spec: ModelSpec) -> dict[str, slice]:
    k, m, q = spec.k, spec.n_effects, len(spec.covariates)
    out = {
        "alpha": slice(0, 1),
        "delta": slice(1, 1 + k),
        "effects": slice(1 + k, 1 + k + m),
        "gamma": slice(1 + k + m, 1 + k + m + q),
    }
    if spec.scale_name:
        out["scale"] = slice(1 + k + m + q, 2 + k + m + q)
    return out


@dataclass(frozen=True)
class DamParams:
    alpha: float
    delta: np.ndarray
    theta: np.ndarray  # (n_policies, l + 1)
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma2: float | None = None
    dispersion: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        for name in ("delta", "zeta", "gamma"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "theta", np.atleast_2d(np.asarray(self.theta, dtype=float)))

    @property
    def effects(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.zeta])

    def check(self, spec: ModelSpec) -> "DamParams":
        expected = {
            "delta": (spec.k,),
            "theta": (len(spec.policies), spec.l + 1),
            "zeta": (len(spec.pairs),),
            "gamma": (len(spec.covariates),),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise SchemaError(f"{name} has shape {getattr(self, name).shape}, spec needs {shape}")
        return self

    def to_vector(self, spec: ModelSpec) -> np.ndarray:
        self.check(spec)
        parts = [[self.alpha], self.delta, self.effects, self.gamma]
        if spec.scale_name == "sigma2":
            parts.append([np.nan if self.sigma2 is None else self.sigma2])
        elif spec.scale_name == "dispersion":
            parts.append([np.nan if self.dispersion is None else self.dispersion])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    @classmethod
    def from_vector(cls, spec: ModelSpec, v) -> "DamParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (len(param_names(spec)),):
            raise SchemaError(f"parameter vector has length {v.shape}, spec needs {len(param_names(spec))}")
        s = param_slices(spec)
        eff = v[s["effects"]]
        scale = float(v[s["scale"]][0]) if "scale" in s else None
        return cls(
            alpha=v[0],
            delta=v[s["delta"]],
            theta=eff[: spec.n_theta].reshape(len(spec.policies), spec.l + 1),
            zeta=eff[spec.n_theta:],
            gamma=v[s["gamma"]],
            sigma2=scale if spec.scale_name == "sigma2" else None,
            dispersion=scale if spec.scale_name == "dispersion" else None,
        )

    def to_dict(self, spec: ModelSpec) -> dict[str, float]:
        return dict(zip(param_names(spec), (float(x) for x in self.to_vector(spec))))

    @classmethod
    def from_dict(cls, spec: ModelSpec, d: Mapping[str, float]) -> "DamParams":
        names = param_names(spec)
        missing = [n for n in names if n not in d]
        if missing:
            raise SchemaError(f"missing parameters: {missing}")
        return cls.from_vector(spec, [d[n] for n in names])


@dataclass(frozen=True)
class TreatmentPath:
    """Forced exposures per policy over lags ``z = 0..l`` at one target time."""

    exposures: Mapping[str, np.ndarray]

    def __post_init__(self):
        ex = {}
        for p, a in self.exposures.items():
            a = np.atleast_1d(np.asarray(a, dtype=float))
            if np.any((a < 0) | (a > 1)):
                raise DomainError(f"forced exposure for {p!r} outside [0, 1]")
            ex[str(p)] = a
        object.__setattr__(self, "exposures", ex)

    @classmethod
    def constant(cls, spec: ModelSpec, levels: Mapping[str, float]) -> "TreatmentPath":
        return cls({p: np.full(spec.l + 1, float(v)) for p, v in levels.items()})


# -- scalar building blocks ------------------------------------------------------

def transform_outcome(y, family: str, log_shift: float = 0.0, population=1.0):
    """Scale on which lagged outcomes enter: rate, or log of the shifted rate."""
    y = np.asarray(y, dtype=float)
    population = np.asarray(population, dtype=float)
    if family == "linear":
        return y / population
    shifted = y + log_shift
    if np.any(shifted <= 0):
        raise DomainError(f"log of nonpositive value: outcome {np.min(y)} + shift {log_shift} <= 0")
    return np.log(shifted / population)


def effect_index(policy_exposures, theta, zeta=None) -> float:
    """``eta = sum theta * a + sum zeta_pq a_p0 a_q0`` for one time point.

    ``policy_exposures`` and ``theta`` are ``(n_policies, l + 1)`` (a 1-D
    vector is read as a single policy). ``zeta`` follows pair order.
    """
    a = np.atleast_2d(np.asarray(policy_exposures, dtype=float))
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    if a.shape != th.shape:
        raise SchemaError(f"exposures {a.shape} and theta {th.shape} disagree")
    eta = float(np.sum(th * a))
    if zeta is not None and len(np.atleast_1d(zeta)):
        pairs = list(combinations(range(a.shape[0]), 2))
        zeta = np.atleast_1d(zeta)
        if len(zeta) != len(pairs):
            raise SchemaError("zeta length does not match the number of policy pairs")
        eta += float(sum(z * a[p, 0] * a[q, 0] for z, (p, q) in zip(zeta, pairs)))
    return eta


def debiased_lag(y_lag, policy_lags, theta, family="linear", log_shift=0.0, zeta=None, population=1.0):
    """Lagged outcome with the prior policy effects removed.

    ``policy_lags`` holds exposures at ``t-b-z`` for ``z = 0..l``.
    """
    if family == "log_link" and float(y_lag) + log_shift <= 0:
        raise DomainError(f"log of nonpositive value: lagged outcome {y_lag} with shift {log_shift}")
    g = float(transform_outcome(y_lag, family, log_shift, population))
    return g - effect_index(policy_lags, theta, zeta)


def _view_exposures(view: LagView, spec: ModelSpec, shift: int) -> np.ndarray:
    rows = []
    for p in spec.policies:
        if p not in view.policy_lags:
            raise SchemaError(f"view lacks policy {p!r}")
        a = view.policy_lags[p]
        if len(a) < spec.k + spec.l + 1:
            raise SchemaError(f"view for {p!r} has {len(a)} lags, spec needs {spec.k + spec.l + 1}")
        rows.append(a[shift: shift + spec.l + 1])
    return np.array(rows)


def conditional_mean(view: LagView, params: DamParams, spec: ModelSpec) -> float:
    """Model mean for one row: a rate (linear) or a count (log-link)."""
    params.check(spec)
    if len(view.outcome_lags) < spec.k:
        raise SchemaError(f"view has {len(view.outcome_lags)} outcome lags, spec needs {spec.k}")
    lp = params.alpha
    for b in range(1, spec.k + 1):
        lp += params.delta[b - 1] * debiased_lag(
            view.outcome_lags[b - 1],
            _view_exposures(view, spec, b),
            params.theta,
            spec.family,
            spec.log_shift,
            params.zeta,
            view.population_lags[b - 1],
        )
    lp += effect_index(_view_exposures(view, spec, 0), params.theta, params.zeta)
    for c, g in zip(spec.covariates, params.gamma):
        if c not in view.covariate_row:
            raise SchemaError(f"view lacks covariate {c!r}")
        lp += g * view.covariate_row[c]
    if spec.family == "linear":
        return float(lp)
    return float(np.exp(lp + np.log(view.population)))


# -- vectorized design -------------------------------------------------------------

def effect_design(policy_lags: Mapping[str, np.ndarray], spec: ModelSpec, shift: int) -> np.ndarray:
    """Columns multiplying the effect vector at time ``t - shift``."""
    cols = []
    for p in spec.policies:
        a = policy_lags[p]
        for z in range(spec.l + 1):
            cols.append(a[:, shift + z])
    for p, q in spec.pairs:
        cols.append(policy_lags[p][:, shift] * policy_lags[q][:, shift])
    return np.column_stack(cols)


@dataclass(frozen=True)
class ModelDesign:
    """Arrays for evaluating a spec on every fitable row of a panel."""

    spec: ModelSpec
    frame: LagFrame
    y: np.ndarray  # target on the model scale
    lags: np.ndarray  # (N, k) transformed lagged outcomes
    effects_now: np.ndarray  # (N, m)
    effects_lag: np.ndarray  # (k, N, m)
    X: np.ndarray  # (N, q)
    offset: np.ndarray  # (N,)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    def with_effects_now(self, effects_now: np.ndarray) -> "ModelDesign":
        return ModelDesign(
            self.spec, self.frame, self.y, self.lags, effects_now, self.effects_lag, self.X, self.offset
        )


def build_design(data: PanelDataset, spec: ModelSpec, frame: LagFrame | None = None) -> ModelDesign:
    for p in spec.policies:
        data.policy(p)
    for c in spec.covariates:
        data.covariate(c)
    if frame is None:
        frame = lag_frame(data, spec.k, spec.l)
    if spec.family == "linear":
        y = frame.y / frame.population
        lags = frame.y_lags / frame.population_lags
        offset = np.zeros(frame.n_rows)
    else:
        if np.any(frame.y < 0):
            raise DomainError("log-link family needs nonnegative counts")
        bad = frame.y_lags + spec.log_shift <= 0
        if np.any(bad):
            r, b = np.argwhere(bad)[0]
            raise DomainError(
                f"log of nonpositive lagged outcome at unit={data.units[frame.unit_idx[r]]!r}, "
                f"time={int(frame.time_idx[r]) - b - 1}; increase log_shift"
            )
        y = frame.y
        lags = np.log((frame.y_lags + spec.log_shift) / frame.population_lags)
        offset = np.log(frame.population)
    e_now = effect_design(frame.policy_lags, spec, 0)
    e_lag = np.stack([effect_design(frame.policy_lags, spec, b) for b in range(1, spec.k + 1)])
    X = np.column_stack([frame.covariates[c] for c in spec.covariates]) if spec.covariates else np.zeros((frame.n_rows, 0))
    return ModelDesign(spec, frame, y, lags, e_now, e_lag, X, offset)


def split_params(spec: ModelSpec, V) -> dict[str, np.ndarray]:
    """Slice a ``(D, p)`` draw matrix (or a single vector) into named blocks."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    s = param_slices(spec)
    out = {
        "alpha": V[:, 0],
        "delta": V[:, s["delta"]],
        "effects": V[:, s["effects"]],
        "gamma": V[:, s["gamma"]],
    }
    out["scale"] = V[:, s["scale"]][:, 0] if "scale" in s else None
    return out


def linear_predictor(design: ModelDesign, V, effects_now: np.ndarray | None = None) -> np.ndarray:
    """``(D, N)`` linear predictors (offset included) for each parameter row of ``V``."""
    P = split_params(design.spec, V)
    e_now = design.effects_now if effects_now is None else effects_now
    lp = P["alpha"][:, None] + P["delta"] @ design.lags.T + P["effects"] @ e_now.T
    for b in range(design.spec.k):
        lp -= P["delta"][:, b: b + 1] * (P["effects"] @ design.effects_lag[b].T)
    if design.X.shape[1]:
        lp += P["gamma"] @ design.X.T
    return lp + design.offset


def mean_response(design: ModelDesign, V, effects_now: np.ndarray | None = None) -> np.ndarray:
    """``(D, N)`` conditional means on the model scale."""
    lp = linear_predictor(design, V, effects_now)
    return lp if design.spec.family == "linear" else np.exp(lp)


def forced_effects(frame_policy_lags: Mapping[str, np.ndarray], spec: ModelSpec, path: TreatmentPath) -> np.ndarray:
    """Effect design at lag 0 after overwriting exposures with a forced path."""
    n = len(next(iter(frame_policy_lags.values())))
    forced = {}
    for p in spec.policies:
        a = np.array(frame_policy_lags[p][:, : spec.l + 1], dtype=float)
        if p in path.exposures:
            ex = path.exposures[p]
            if len(ex) != spec.l + 1:
                raise SchemaError(f"forced path for {p!r} needs {spec.l + 1} entries, got {len(ex)}")
            a = np.broadcast_to(ex, (n, spec.l + 1)).copy()
        forced[p] = a
    unknown = set(path.exposures) - set(spec.policies)
    if unknown:
        raise SchemaError(f"forced path names policies absent from the model: {sorted(unknown)}")
    return effect_design(forced, spec, 0)


def impute_counterfactual_path(
    data: PanelDataset,
    unit,
    params: DamParams,
    spec: ModelSpec,
    path,
    horizon: tuple[int, int],
) -> np.ndarray:
    """Mean potential outcomes for one unit under a forced treatment path.

    Lagged outcomes enter as observed outcomes debiased by the *observed*
    exposures, i.e. ``g(Y_{t-b}) - eta_{t-b}`` is the control-counterfactual
    proxy; only the contemporaneous effect term uses the forced path.
    ``path`` is a :class:`TreatmentPath` applied at every ``t`` or a mapping
    from time to path. Policies absent from a path keep their observed values.
    """
    t0, t1 = horizon
    if t0 < spec.k + spec.l or t1 > data.T or t0 > t1:
        raise DataError(f"horizon {horizon} outside fitable range [{spec.k + spec.l}, {data.T}]")
    i = data.unit_index(unit)
    design = build_design(data, spec)
    rows = np.flatnonzero((design.frame.unit_idx == i) & (design.frame.time_idx >= t0) & (design.frame.time_idx <= t1))
    out = []
    V = params.to_vector(spec)
    for r in rows:
        t = int(design.frame.time_idx[r])
        p = path[t] if isinstance(path, Mapping) else path
        lags = {name: m[r: r + 1] for name, m in design.frame.policy_lags.items()}
        e_now = forced_effects(lags, spec, p)
        sub = ModelDesign(
            spec,
            design.frame,
            design.y[r: r + 1],
            design.lags[r: r + 1],
            e_now,
            design.effects_lag[:, r: r + 1],
            design.X[r: r + 1],
            design.offset[r: r + 1],
        )
        out.append(float(mean_response(sub, V)[0, 0]))
    return np.array(out)
