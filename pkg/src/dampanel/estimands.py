"""Causal contrasts computed from fitted DAMs.

Every estimand is evaluated per parameter draw (posterior draws, or parametric
draws from a frequentist fit's normal approximation) and summarized by the
draw median and an equal-tail interval. Results are on the rate scale.

Imputation of the SATT cells follows one of two schemes:

``observed_plus_model``
    the observed outcome stands in for the treated potential outcome and the
    untreated one is drawn from the predictive distribution, chaining forward
    from the adoption time so imputed untreated outcomes serve as later lags;
``double_draw``
    both potential outcomes are drawn independently from the predictive
    distribution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import nbinom, norm, poisson

from .errors import EmptyEstimandError, SchemaError, SpecMismatchError
from .estimation.results import FreqFit, PosteriorFit
from .model import (
    ModelDesign,
    ModelSpec,
    TreatmentPath,
    build_design,
    forced_effects,
    linear_predictor,
    mean_response,
    split_params,
)
from .panel import LagFrame, PanelDataset

KINDS = ("satt_avg", "satt_by_period", "sapo", "multiplicative_ratio")
IMPUTATIONS = ("observed_plus_model", "double_draw")


@dataclass(frozen=True)
class EstimandRequest:
    kind: str = "satt_avg"
    horizon: int = 3
    policy: str | None = None
    levels: tuple = ()
    imputation: str = "double_draw"
    interval_level: float = 0.95
    n_draws: int = 4000
    seed: int = 0
    eval_time: int | None = None
    predictive: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if int(self.horizon) < 1:
            raise SchemaError("horizon must be at least 1")
        if not 0 < float(self.interval_level) < 1:
            raise SchemaError("interval_level must lie in (0, 1)")
        if self.imputation not in IMPUTATIONS:
            raise SchemaError(f"imputation must be one of {IMPUTATIONS}")
        if int(self.n_draws) < 1:
            raise SchemaError("n_draws must be positive")
        levels = tuple(dict(lv) for lv in self.levels)
        for lv in levels:
            for p, v in lv.items():
                if not 0 <= float(v) <= 1:
                    raise SchemaError(f"level {v} for policy {p!r} outside [0, 1]")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "horizon", int(self.horizon))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "policy": self.policy,
            "levels": [dict(lv) for lv in self.levels],
            "imputation": self.imputation,
            "interval_level": self.interval_level,
            "n_draws": self.n_draws,
            "seed": self.seed,
            "eval_time": self.eval_time,
            "predictive": self.predictive,
        }

    @classmethod
    def from_dict(cls, d) -> "EstimandRequest":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown estimand keys: {sorted(extra)}")
        return cls(**dict(d))


@dataclass
class EstimandResult:
    kind: str
    point: float
    interval: tuple
    n_contributing_units: int
    per_period: list | None = None
    n_cells: int = 0
    warnings: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    draws: np.ndarray | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "point": float(self.point),
            "interval": [float(self.interval[0]), float(self.interval[1])],
            "n_contributing_units": int(self.n_contributing_units),
            "n_cells": int(self.n_cells),
            "per_period": self.per_period,
            "warnings": list(self.warnings),
            "metadata": self.metadata,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_per_period_csv(self, path):
        if not self.per_period:
            raise SchemaError("result has no per-period series")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["period", "point", "lo", "hi", "n_units"])
            for row in self.per_period:
                w.writerow([row["period"], repr(row["point"]), repr(row["lo"]), repr(row["hi"]), row["n_units"]])


def write_sapo_csv(results: list[EstimandResult], path):
    policies = sorted({p for r in results for p in r.metadata["level"]})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(policies + ["point", "lo", "hi"])
        for r in results:
            lv = r.metadata["level"]
            w.writerow([repr(float(lv.get(p, float("nan")))) for p in policies]
                       + [repr(float(r.point)), repr(float(r.interval[0])), repr(float(r.interval[1]))])


# -- shared machinery -------------------------------------------------------------

def _fit_spec(fit) -> ModelSpec:
    spec = getattr(fit, "spec", None)
    if spec is None:
        raise SpecMismatchError(f"{getattr(fit, 'method', 'fit')} result carries no DAM specification")
    return spec


def parameter_draws(fit, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """``(D, p)`` parameter draws: posterior rows, or normal-approximation draws."""
    if isinstance(fit, PosteriorFit):
        return fit.draws
    if isinstance(fit, FreqFit):
        return fit.draw_matrix(n_draws, rng)
    raise TypeError(f"unsupported fit type {type(fit).__name__}")


def _summarize(draws: np.ndarray, level: float):
    a = (1 - level) / 2
    lo, med, hi = np.quantile(draws, [a, 0.5, 1 - a])
    return float(med), (float(lo), float(hi))


def _subset(design: ModelDesign, rows: np.ndarray) -> ModelDesign:
    f = design.frame
    frame = LagFrame(
        k=f.k,
        l=f.l,
        unit_idx=f.unit_idx[rows],
        time_idx=f.time_idx[rows],
        y=f.y[rows],
        population=f.population[rows],
        y_lags=f.y_lags[rows],
        population_lags=f.population_lags[rows],
        policy_lags={p: a[rows] for p, a in f.policy_lags.items()},
        covariates={c: x[rows] for c, x in f.covariates.items()},
    )
    return ModelDesign(
        design.spec,
        frame,
        design.y[rows],
        design.lags[rows],
        design.effects_now[rows],
        design.effects_lag[:, rows],
        design.X[rows],
        design.offset[rows],
    )


def _row_index(data: PanelDataset, spec: ModelSpec, unit_idx, time_idx) -> np.ndarray:
    start = spec.k + spec.l
    return np.asarray(unit_idx) * (data.T - start + 1) + (np.asarray(time_idx) - start)


def _forced(design: ModelDesign, spec: ModelSpec, levels: dict) -> np.ndarray:
    path = TreatmentPath.constant(spec, levels)
    return forced_effects(design.frame.policy_lags, spec, path)


def _predictive(mean, V, spec, population, rng):
    """One predictive draw per entry of ``mean`` (model scale), returned as rates."""
    scale = split_params(spec, V)["scale"]
    if spec.family == "linear":
        return mean + np.sqrt(scale)[:, None] * rng.standard_normal(mean.shape)
    if spec.count_model == "poisson":
        counts = rng.poisson(mean)
    else:
        r = 1.0 / scale[:, None]
        counts = rng.negative_binomial(np.broadcast_to(r, mean.shape), r / (r + mean))
    return counts / population


def _chained_untreated(sub: ModelDesign, V, e0, units, times, periods, rng) -> np.ndarray:
    """Untreated predictive draws built forward from each adoption time.

    A lag that falls inside the unit's own window is itself a missing
    untreated outcome, so its imputed draw replaces the debiased observed lag.
    Lags before adoption are observed untreated outcomes and enter as usual.
    """
    spec = sub.spec
    P = split_params(spec, V)
    lp = linear_predictor(sub, V, e0)
    eta_off = P["effects"] @ e0.T
    pop = sub.frame.population
    position = {(u, t): j for j, (u, t) in enumerate(zip(units.tolist(), times.tolist()))}
    drawn = np.empty_like(lp)
    lagged = np.empty_like(lp)  # imputed draws on the model's lag scale
    for m in range(int(periods.max()) + 1):
        cols = np.flatnonzero(periods == m)
        for b in range(1, min(m, spec.k) + 1):
            src = np.array([position[(units[j], times[j] - b)] for j in cols])
            observed = sub.lags[cols, b - 1] - P["effects"] @ sub.effects_lag[b - 1][cols].T
            imputed = lagged[:, src] - eta_off[:, src]
            lp[:, cols] += P["delta"][:, b - 1: b] * (imputed - observed)
        mean = lp[:, cols] if spec.family == "linear" else np.exp(lp[:, cols])
        draw = _predictive(mean, V, spec, pop[cols], rng)
        drawn[:, cols] = draw
        if spec.family == "linear":
            lagged[:, cols] = draw
        else:
            lagged[:, cols] = np.log((draw * pop[cols] + spec.log_shift) / pop[cols])
    return drawn


def _to_rate(mean, spec, population):
    return mean if spec.family == "linear" else mean / population


def adopter_cells(adoption_times, horizon: int, T: int):
    """Cells ``(i, T_i + m)`` for adopters and ``m < horizon`` within ``0..T``.

    Returns unit indices, times and event times ``m``. This is the single
    definition of the treated-cell set shared by estimands, simulation truth
    and comparator scoring.
    """
    units, times, periods = [], [], []
    for i, ti in enumerate(np.asarray(adoption_times)):
        if ti < 0:
            continue
        for m in range(horizon):
            if ti + m <= T:
                units.append(i)
                times.append(int(ti) + m)
                periods.append(m)
    return np.array(units, dtype=int), np.array(times, dtype=int), np.array(periods, dtype=int)


def _satt_cells(data: PanelDataset, spec: ModelSpec, policy: str, horizon: int):
    T_i = data.adoption_times(policy)
    start = spec.k + spec.l
    warnings = []
    for i, ti in enumerate(T_i):
        if ti >= 0 and ti + horizon - 1 > data.T:
            warnings.append(f"unit {data.units[i]!r} adopts at {int(ti)}; periods beyond T={data.T} dropped")
        if 0 <= ti < start:
            warnings.append(
                f"unit {data.units[i]!r} adopts at {int(ti)} before the first fitable period {start}; dropped"
            )
    usable = np.where(T_i >= start, T_i, -1)
    units, times, periods = adopter_cells(usable, horizon, data.T)
    if len(units) == 0:
        raise EmptyEstimandError(f"no treated unit contributes a cell for policy {policy!r}")
    return units, times, periods, warnings


def _resolve_policy(spec: ModelSpec, policy: str | None) -> str:
    if policy is None:
        if len(spec.policies) != 1:
            raise SchemaError("name the policy for a multi-policy model")
        return spec.policies[0]
    if policy not in spec.policies:
        raise SpecMismatchError(f"policy {policy!r} absent from the model {spec.policies}")
    return policy


def _satt_draws(fit, data: PanelDataset, request: EstimandRequest):
    spec = _fit_spec(fit)
    policy = _resolve_policy(spec, request.policy)
    rng = np.random.default_rng(request.seed)
    V = parameter_draws(fit, request.n_draws, rng)
    design = build_design(data, spec)
    units, times, periods, warnings = _satt_cells(data, spec, policy, request.horizon)
    sub = _subset(design, _row_index(data, spec, units, times))
    untreated = {p: 0.0 for p in spec.policies if p == policy}
    e0 = _forced(sub, spec, untreated)
    pop = sub.frame.population
    mean1 = mean_response(sub, V)
    mean0 = mean_response(sub, V, e0)
    if request.imputation == "observed_plus_model":
        y1 = np.broadcast_to(data.rate[units, times], mean1.shape)
        y0 = _chained_untreated(sub, V, e0, units, times, periods, rng)
    else:
        y1 = _predictive(mean1, V, spec, pop, rng)
        y0 = _predictive(mean0, V, spec, pop, rng)
    diff = y1 - y0
    return diff, units, periods, warnings


def satt(fit, data: PanelDataset, request: EstimandRequest | None = None) -> EstimandResult:
    """Average treated-minus-untreated difference over adopters' first periods.

    Cells are ``(i, T_i + m)`` for ``m < horizon``; the estimand is the mean
    over all contributing cells.
    """
    request = request or EstimandRequest()
    diff, units, periods, warnings = _satt_draws(fit, data, request)
    draws = diff.mean(axis=1)
    point, interval = _summarize(draws, request.interval_level)
    per_period = _per_period(diff, units, periods, request) if request.kind == "satt_by_period" else None
    return EstimandResult(
        kind=request.kind,
        point=point,
        interval=interval,
        n_contributing_units=len(np.unique(units)),
        per_period=per_period,
        n_cells=len(units),
        warnings=warnings,
        metadata={**request.to_dict(), "n_parameter_draws": int(diff.shape[0]), "scale": "rate"},
        draws=draws,
    )


def _per_period(diff, units, periods, request):
    out = []
    for m in range(request.horizon):
        cols = periods == m
        if not cols.any():
            out.append({"period": m, "point": float("nan"), "lo": float("nan"), "hi": float("nan"), "n_units": 0})
            continue
        d = diff[:, cols].mean(axis=1)
        point, (lo, hi) = _summarize(d, request.interval_level)
        out.append({"period": m, "point": point, "lo": lo, "hi": hi, "n_units": int(cols.sum())})
    return out


def satt_by_period(fit, data: PanelDataset, request: EstimandRequest | None = None) -> EstimandResult:
    """SATT plus one entry per post-adoption period ``m = 0..horizon-1``."""
    request = request or EstimandRequest(kind="satt_by_period")
    if request.kind != "satt_by_period":
        request = EstimandRequest.from_dict({**request.to_dict(), "kind": "satt_by_period"})
    return satt(fit, data, request)


def satt_period_draws(fit, data: PanelDataset, request: EstimandRequest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-draw overall SATT, per-period SATT ``(D, horizon)`` and cell counts."""
    diff, units, periods, _ = _satt_draws(fit, data, request)
    counts = np.array([(periods == m).sum() for m in range(request.horizon)])
    per = np.column_stack(
        [diff[:, periods == m].mean(axis=1) if counts[m] else np.full(diff.shape[0], np.nan)
         for m in range(request.horizon)]
    )
    return diff.mean(axis=1), per, counts


def sapo_grid(fit, data: PanelDataset, levels, request: EstimandRequest | None = None) -> list[EstimandResult]:
    """Sample average potential outcome over all units for each forced level.

    Each level maps policy names to an exposure held over lags ``0..l`` at the
    evaluation period (default: the final period for every unit). With
    ``predictive=True`` outcome noise is added using common random numbers
    across levels, so contrasts between levels carry no extra noise.
    """
    request = request or EstimandRequest(kind="sapo")
    spec = _fit_spec(fit)
    levels = [dict(lv) for lv in levels]
    if not levels:
        raise SchemaError("sapo needs at least one level")
    for lv in levels:
        unknown = set(lv) - set(spec.policies)
        if unknown:
            raise SpecMismatchError(f"level names policies absent from the model: {sorted(unknown)}")
    eval_time = data.T if request.eval_time is None else int(request.eval_time)
    if not spec.k + spec.l <= eval_time <= data.T:
        raise SchemaError(f"eval_time {eval_time} outside fitable range")
    rng = np.random.default_rng(request.seed)
    V = parameter_draws(fit, request.n_draws, rng)
    design = build_design(data, spec)
    units = np.arange(data.n_units)
    sub = _subset(design, _row_index(data, spec, units, np.full(data.n_units, eval_time)))
    pop = sub.frame.population
    uniforms = rng.random((V.shape[0], data.n_units)) if request.predictive else None
    scale = split_params(spec, V)["scale"]
    results = []
    for lv in levels:
        mean = mean_response(sub, V, _forced(sub, spec, lv))
        if request.predictive:
            if spec.family == "linear":
                vals = mean + np.sqrt(scale)[:, None] * norm.ppf(uniforms)
            elif spec.count_model == "poisson":
                vals = poisson.ppf(uniforms, mean) / pop
            else:
                r = 1.0 / scale[:, None]
                vals = nbinom.ppf(uniforms, r, r / (r + mean)) / pop
        else:
            vals = _to_rate(mean, spec, pop)
        draws = vals.mean(axis=1)
        point, interval = _summarize(draws, request.interval_level)
        results.append(
            EstimandResult(
                kind="sapo",
                point=point,
                interval=interval,
                n_contributing_units=data.n_units,
                n_cells=data.n_units,
                metadata={
                    **request.to_dict(),
                    "level": lv,
                    "eval_time": eval_time,
                    "eval_time_note": "final panel period used for every unit unless overridden",
                    "n_parameter_draws": int(V.shape[0]),
                    "scale": "rate",
                },
                draws=draws,
            )
        )
    return results


def multiplicative_ratio(fit, data: PanelDataset, request: EstimandRequest | None = None) -> EstimandResult:
    """Ratio of average model means under the treated path versus no treatment.

    Averaged over the SATT cells; the treated path holds the policy at 1 over
    lags ``0..l`` unless ``request.levels`` supplies one level mapping.
    """
    request = request or EstimandRequest(kind="multiplicative_ratio")
    spec = _fit_spec(fit)
    if spec.family != "log_link":
        raise SpecMismatchError("multiplicative_ratio needs a log_link model")
    policy = _resolve_policy(spec, request.policy)
    rng = np.random.default_rng(request.seed)
    V = parameter_draws(fit, request.n_draws, rng)
    design = build_design(data, spec)
    units, times, periods, warnings = _satt_cells(data, spec, policy, request.horizon)
    sub = _subset(design, _row_index(data, spec, units, times))
    treated_level = request.levels[0] if request.levels else {policy: 1.0}
    zero_level = {p: 0.0 for p in treated_level}
    num = mean_response(sub, V, _forced(sub, spec, treated_level)).mean(axis=1)
    den = mean_response(sub, V, _forced(sub, spec, zero_level)).mean(axis=1)
    assert np.all(den > 0), "log-link means must be positive"
    draws = num / den
    point, interval = _summarize(draws, request.interval_level)
    return EstimandResult(
        kind="multiplicative_ratio",
        point=point,
        interval=interval,
        n_contributing_units=len(np.unique(units)),
        n_cells=len(units),
        warnings=warnings,
        metadata={**request.to_dict(), "treated_level": treated_level, "n_parameter_draws": int(V.shape[0])},
        draws=draws,
    )


def evaluate(fit, data: PanelDataset, request: EstimandRequest):
    """Dispatch on ``request.kind``; sapo returns a list of results."""
    if request.kind == "satt_avg":
        return satt(fit, data, request)
    if request.kind == "satt_by_period":
        return satt_by_period(fit, data, request)
    if request.kind == "sapo":
        return sapo_grid(fit, data, request.levels, request)
    return multiplicative_ratio(fit, data, request)
