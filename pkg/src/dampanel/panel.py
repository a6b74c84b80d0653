"""Rectangular unit-by-time panels and their lag-aligned views."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DomainError,
    InsufficientHistoryError,
    MissingCellError,
    ParseError,
    SchemaError,
)

UNIT, TIME, OUTCOME, POPULATION = "unit", "time", "outcome", "population"
POLICY_PREFIX, COVARIATE_PREFIX = "policy:", "covariate:"


def _frozen(a, shape=None, name="array"):
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise SchemaError(f"{name} has shape {arr.shape}, expected {shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of ``n`` units observed at times ``0..T``.

    ``outcome``, ``population`` and every policy/covariate array have shape
    ``(n_units, T + 1)``. Arrays are copied and made read-only on construction.
    """

    units: tuple
    outcome: np.ndarray
    policies: Mapping[str, np.ndarray] = field(default_factory=dict)
    population: np.ndarray | None = None
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    time_labels: tuple | None = None
    source_schema: Mapping[str, str] | None = None

    def __post_init__(self):
        units = tuple(str(u) for u in self.units)
        if len(set(units)) != len(units):
            raise SchemaError("duplicate unit identifiers")
        y = np.array(self.outcome, dtype=float)
        if y.ndim != 2 or y.shape[0] != len(units) or y.shape[1] < 1:
            raise SchemaError(f"outcome must have shape (n_units, n_times), got {y.shape}")
        if not np.all(np.isfinite(y)):
            i, t = np.argwhere(~np.isfinite(y))[0]
            raise MissingCellError(units[i], int(t), OUTCOME)
        shape = y.shape
        has_pop = self.population is not None
        pop = np.ones(shape) if self.population is None else np.array(self.population, dtype=float)
        if pop.shape != shape:
            raise SchemaError(f"population has shape {pop.shape}, expected {shape}")
        if not np.all(np.isfinite(pop)) or np.any(pop <= 0):
            raise DomainError("population must be positive and finite in every cell")
        policies = {}
        for name, a in self.policies.items():
            a = np.array(a, dtype=float)
            if a.shape != shape:
                raise SchemaError(f"policy {name!r} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                i, t = np.argwhere(~np.isfinite(a))[0]
                raise MissingCellError(units[i], int(t), POLICY_PREFIX + name)
            if np.any((a < 0) | (a > 1)):
                i, t = np.argwhere((a < 0) | (a > 1))[0]
                raise DomainError(
                    f"policy {name!r} exposure {a[i, t]} outside [0, 1] at unit={units[i]!r}, time={t}"
                )
            policies[str(name)] = _frozen(a)
        covariates = {}
        for name, x in self.covariates.items():
            x = np.array(x, dtype=float)
            if x.shape != shape:
                raise SchemaError(f"covariate {name!r} has shape {x.shape}, expected {shape}")
            if not np.all(np.isfinite(x)):
                i, t = np.argwhere(~np.isfinite(x))[0]
                raise MissingCellError(units[i], int(t), COVARIATE_PREFIX + name)
            covariates[str(name)] = _frozen(x)
        labels = tuple(range(shape[1])) if self.time_labels is None else tuple(self.time_labels)
        if len(labels) != shape[1]:
            raise SchemaError("time_labels length does not match the number of periods")
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "outcome", _frozen(y))
        object.__setattr__(self, "population", _frozen(pop))
        object.__setattr__(self, "policies", MappingProxyType(policies))
        object.__setattr__(self, "covariates", MappingProxyType(covariates))
        object.__setattr__(self, "time_labels", labels)
        object.__setattr__(self, "_has_population", has_pop)
        if self.source_schema is not None:
            object.__setattr__(self, "source_schema", MappingProxyType(dict(self.source_schema)))

    # -- shape -------------------------------------------------------------
    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]

    @property
    def T(self) -> int:
        """Index of the final period."""
        return self.n_periods - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_periods)

    @property
    def has_population(self) -> bool:
        return self._has_population

    @property
    def rate(self) -> np.ndarray:
        return self.outcome / self.population

    def policy(self, name: str) -> np.ndarray:
        try:
            return self.policies[name]
        except KeyError:
            raise SchemaError(f"unknown policy {name!r}; have {sorted(self.policies)}") from None

    def covariate(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name]
        except KeyError:
            raise SchemaError(f"unknown covariate {name!r}; have {sorted(self.covariates)}") from None

    def unit_index(self, unit) -> int:
        try:
            return self.units.index(str(unit))
        except ValueError:
            raise SchemaError(f"unknown unit {unit!r}") from None

    def adoption_times(self, policy: str) -> np.ndarray:
        """First period with positive exposure per unit; ``-1`` if never exposed."""
        treated = self.policy(policy) > 0
        first = np.argmax(treated, axis=1)
        return np.where(treated.any(axis=1), first, -1)

    def evolve(self, **changes) -> "PanelDataset":
        """Copy with fields replaced (population kept explicit if it was)."""
        if "population" not in changes:
            changes["population"] = self.population if self.has_population else None
        return replace(self, **changes)

    def with_policy(self, name: str, exposure) -> "PanelDataset":
        policies = dict(self.policies)
        policies[name] = exposure
        return self.evolve(policies=policies)

    def permute_units(self, order: Sequence[int]) -> "PanelDataset":
        order = np.asarray(order)
        return self.evolve(
            units=tuple(self.units[i] for i in order),
            outcome=self.outcome[order],
            population=self.population[order] if self.has_population else None,
            policies={k: v[order] for k, v in self.policies.items()},
            covariates={k: v[order] for k, v in self.covariates.items()},
        )


def dichotomize(data: PanelDataset, policy: str) -> PanelDataset:
    """Map exposure > 0 to 1 and exposure 0 to 0 for one policy."""
    a = data.policy(policy)
    return data.with_policy(policy, (a > 0).astype(float))


# -- CSV ---------------------------------------------------------------------

def _split_schema(schema: Mapping[str, str]):
    schema = dict(schema)
    for role in (UNIT, TIME, OUTCOME):
        if role not in schema:
            raise SchemaError(f"schema must name a {role!r} column")
    policies, covariates = {}, {}
    for role, col in schema.items():
        if role.startswith(POLICY_PREFIX):
            policies[role[len(POLICY_PREFIX):]] = col
        elif role.startswith(COVARIATE_PREFIX):
            covariates[role[len(COVARIATE_PREFIX):]] = col
        elif role not in (UNIT, TIME, OUTCOME, POPULATION):
            raise SchemaError(f"unknown schema role {role!r}")
    if not policies:
        raise SchemaError("schema must name at least one 'policy:<name>' column")
    return schema, policies, covariates


def _parse_float(text) -> float | None:
    """Exact decimal parse; ``None`` for text that is not a plain number."""
    if text is None or (isinstance(text, float) and np.isnan(text)):
        return float("nan")
    text = text.strip()
    if text == "":
        return float("nan")
    if "_" in text or "," in text:
        return None
    try:
        return float(text)
    except ValueError:
        return None


def _numeric(frame: pd.DataFrame, column: str, role: str) -> np.ndarray:
    # pandas' fast float parser can be off by one ulp; float() round-trips repr exactly
    raw = frame[column]
    parsed = [_parse_float(v) for v in raw]
    bad = [pos for pos, v in enumerate(parsed) if v is None]
    if bad:
        pos = bad[0]
        raise ParseError(
            f"non-numeric {role} value {raw.iloc[pos]!r} in column {column!r} at line {pos + 2}",
            row=pos + 2,
            column=column,
        )
    return np.array(parsed, dtype=float)


def load_csv(path, schema: Mapping[str, str]) -> PanelDataset:
    """Read a long-format CSV (one row per unit-time) into a validated panel.

    ``schema`` maps roles (``unit``, ``time``, ``outcome``, optional
    ``population``, ``policy:<name>``, ``covariate:<name>``) to column names.
    Times must be consecutive integers; they are re-indexed to ``0..T``.
    """
    schema, policy_cols, covariate_cols = _split_schema(schema)
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    for role, col in schema.items():
        if col not in frame.columns:
            raise SchemaError(f"column {col!r} for role {role!r} not found in {path.name}")
    if frame.empty:
        raise SchemaError(f"{path.name} has no data rows")

    units_raw = frame[schema[UNIT]]
    if units_raw.isna().any():
        pos = int(np.flatnonzero(units_raw.isna().to_numpy())[0])
        raise ParseError(f"empty unit identifier at line {pos + 2}", row=pos + 2, column=schema[UNIT])
    times_num = _numeric(frame, schema[TIME], TIME)
    if np.isnan(times_num).any():
        pos = int(np.flatnonzero(np.isnan(times_num))[0])
        raise ParseError(f"empty time value at line {pos + 2}", row=pos + 2, column=schema[TIME])
    if np.any(times_num != np.round(times_num)):
        pos = int(np.flatnonzero(times_num != np.round(times_num))[0])
        raise ParseError(f"time must be an integer at line {pos + 2}", row=pos + 2, column=schema[TIME])
    times_int = times_num.astype(np.int64)

    units = list(dict.fromkeys(units_raw.tolist()))
    labels = np.unique(times_int)
    if np.any(np.diff(labels) != 1):
        gap = int(labels[np.flatnonzero(np.diff(labels) != 1)[0]])
        raise SchemaError(f"time index has a gap after {gap}")
    u_index = {u: i for i, u in enumerate(units)}
    ui = np.array([u_index[u] for u in units_raw])
    ti = times_int - labels[0]
    shape = (len(units), len(labels))
    seen = np.zeros(shape, dtype=bool)
    if np.any(np.bincount(ui * shape[1] + ti, minlength=shape[0] * shape[1]) > 1):
        dup = np.flatnonzero(np.bincount(ui * shape[1] + ti) > 1)[0]
        raise SchemaError(f"duplicate row for unit={units[dup // shape[1]]!r}, time={labels[dup % shape[1]]}")
    seen[ui, ti] = True

    def grid(column, role):
        vals = _numeric(frame, column, role)
        out = np.full(shape, np.nan)
        out[ui, ti] = vals
        missing = np.argwhere(np.isnan(out) | ~seen)
        if len(missing):
            i, t = missing[0]
            raise MissingCellError(units[i], int(labels[t]), column)
        return out

    outcome = grid(schema[OUTCOME], OUTCOME)
    population = grid(schema[POPULATION], POPULATION) if POPULATION in schema else None
    policies = {}
    for name, col in policy_cols.items():
        a = grid(col, POLICY_PREFIX + name)
        if np.any((a < 0) | (a > 1)):
            i, t = np.argwhere((a < 0) | (a > 1))[0]
            raise DomainError(
                f"policy {name!r} exposure {a[i, t]} outside [0, 1] at unit={units[i]!r}, time={labels[t]}"
            )
        policies[name] = a
    covariates = {name: grid(col, COVARIATE_PREFIX + name) for name, col in covariate_cols.items()}
    return PanelDataset(
        units=tuple(units),
        outcome=outcome,
        policies=policies,
        population=population,
        covariates=covariates,
        time_labels=tuple(int(v) for v in labels),
        source_schema=schema,
    )


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_csv(data: PanelDataset, path, schema: Mapping[str, str] | None = None) -> None:
    """Write the panel in long format, unit-major, using original time labels."""
    if schema is None:
        schema = data.source_schema
    if schema is None:
        schema = {UNIT: "unit", TIME: "time", OUTCOME: "outcome"}
        if data.has_population:
            schema[POPULATION] = "population"
        schema.update({POLICY_PREFIX + p: p for p in data.policies})
        schema.update({COVARIATE_PREFIX + c: c for c in data.covariates})
    schema, policy_cols, covariate_cols = _split_schema(schema)
    columns = [(schema[UNIT], None), (schema[TIME], None), (schema[OUTCOME], data.outcome)]
    if POPULATION in schema:
        columns.append((schema[POPULATION], data.population))
    columns += [(col, data.policy(name)) for name, col in policy_cols.items()]
    columns += [(col, data.covariate(name)) for name, col in covariate_cols.items()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([c for c, _ in columns])
        for i, unit in enumerate(data.units):
            for t, label in enumerate(data.time_labels):
                writer.writerow([unit, label] + [_fmt(arr[i, t]) for _, arr in columns[2:]])


# -- lag structure -------------------------------------------------------------

@dataclass(frozen=True)
class LagView:
    """Everything the model needs to evaluate one (unit, target time) row."""

    unit: str
    target_time: int
    outcome: float
    population: float
    outcome_lags: np.ndarray  # Y_{t-1}, ..., Y_{t-k}
    population_lags: np.ndarray
    policy_lags: Mapping[str, np.ndarray]  # A_{t}, A_{t-1}, ..., A_{t-k-l}
    covariate_row: Mapping[str, float]


@dataclass(frozen=True)
class LagFrame:
    """Column-stacked lag views; row ``r`` is (unit_idx[r], time_idx[r])."""

    k: int
    l: int
    unit_idx: np.ndarray
    time_idx: np.ndarray
    y: np.ndarray
    population: np.ndarray
    y_lags: np.ndarray  # (N, k), column b-1 holds Y_{t-b}
    population_lags: np.ndarray
    policy_lags: Mapping[str, np.ndarray]  # (N, k+l+1), column z holds A_{t-z}
    covariates: Mapping[str, np.ndarray]

    @property
    def n_rows(self) -> int:
        return len(self.y)


def _check_history(data: PanelDataset, k: int, l: int):
    if k < 1 or l < 0:
        raise SchemaError(f"need k >= 1 and l >= 0, got k={k}, l={l}")
    if data.T < k + l:
        raise InsufficientHistoryError(
            f"panel has T={data.T} but k + l = {k + l}; no period has enough history"
        )


def lag_frame(data: PanelDataset, k: int, l: int) -> LagFrame:
    _check_history(data, k, l)
    n, T = data.n_units, data.T
    start = k + l
    times = np.arange(start, T + 1)
    ui = np.repeat(np.arange(n), len(times))
    ti = np.tile(times, n)
    y_lags = np.stack([data.outcome[ui, ti - b] for b in range(1, k + 1)], axis=1)
    p_lags = np.stack([data.population[ui, ti - b] for b in range(1, k + 1)], axis=1)
    pol = {
        name: np.stack([a[ui, ti - z] for z in range(k + l + 1)], axis=1)
        for name, a in data.policies.items()
    }
    cov = {name: x[ui, ti] for name, x in data.covariates.items()}
    return LagFrame(
        k=k,
        l=l,
        unit_idx=ui,
        time_idx=ti,
        y=data.outcome[ui, ti],
        population=data.population[ui, ti],
        y_lags=y_lags,
        population_lags=p_lags,
        policy_lags=pol,
        covariates=cov,
    )


def lag_views(data: PanelDataset, k: int, l: int) -> list[LagView]:
    """One view per (unit, t) with t >= k + l; ``n * (T - k - l + 1)`` in total."""
    frame = lag_frame(data, k, l)
    views = []
    for r in range(frame.n_rows):
        views.append(
            LagView(
                unit=data.units[frame.unit_idx[r]],
                target_time=int(frame.time_idx[r]),
                outcome=float(frame.y[r]),
                population=float(frame.population[r]),
                outcome_lags=frame.y_lags[r],
                population_lags=frame.population_lags[r],
                policy_lags={name: m[r] for name, m in frame.policy_lags.items()},
                covariate_row={name: float(x[r]) for name, x in frame.covariates.items()},
            )
        )
    return views
