"""Baseline estimators of the treated-unit average effect over the first
post-adoption periods, each with a unit-resampling bootstrap interval.

* ``twfe``: two-way fixed effects regression coefficient.
* ``did_gt``: group-time difference in differences with not-yet-treated
  controls and base period ``g - 1``, aggregated over event times.
* ``synth``: separate simplex-weight synthetic control per treated unit.

All work on the rate scale with a binary, absorbing policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import DomainError, EstimationError, InsufficientHistoryError, RankError
from .panel import PanelDataset


@dataclass
class ComparatorResult:
    estimator: str
    point: float
    interval: tuple
    per_group_detail: list | None = None
    n_boot: int = 0
    warnings: list = field(default_factory=list)
    boot: np.ndarray | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "point": float(self.point),
            "interval": [float(self.interval[0]), float(self.interval[1])],
            "per_group_detail": self.per_group_detail,
            "n_boot": int(self.n_boot),
            "warnings": list(self.warnings),
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _binary(data: PanelDataset, policy: str) -> np.ndarray:
    A = data.policy(policy)
    if not np.all((A == 0) | (A == 1)):
        raise DomainError(f"policy {policy!r} must be binary; dichotomize it first")
    return A


def _absorbing(A: np.ndarray, policy: str):
    if np.any(np.diff(A, axis=1) < 0):
        raise DomainError(f"policy {policy!r} is not absorbing (a unit leaves treatment)")


def _percentile(boot: np.ndarray, level: float):
    boot = boot[np.isfinite(boot)]
    if boot.size == 0:
        return (float("nan"), float("nan"))
    a = (1 - level) / 2
    lo, hi = np.quantile(boot, [a, 1 - a])
    return (float(lo), float(hi))


def _resample_counts(n: int, n_boot: int, rng) -> np.ndarray:
    """``(n_boot, n)`` multiplicities of a with-replacement unit resample."""
    idx = rng.integers(0, n, size=(n_boot, n))
    W = np.zeros((n_boot, n))
    np.add.at(W, (np.repeat(np.arange(n_boot), n), idx.ravel()), 1.0)
    return W


# -- two-way fixed effects --------------------------------------------------------------

def _twfe_weighted(R: np.ndarray, A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """TWFE slope for each row of unit weights ``W`` (balanced panel).

    With integer unit weights this equals OLS on the resampled panel with each
    copy of a unit given its own fixed effect.
    """
    def within(X):
        unit_mean = X.mean(axis=1)  # (n,)
        Xu = X - unit_mean[:, None]
        time_mean = (W @ Xu) / W.sum(axis=1, keepdims=True)  # (B, P)
        return Xu[None, :, :] - time_mean[:, None, :]

    ry, ra = within(R), within(A)
    num = np.einsum("bn,bnp->b", W, ry * ra)
    den = np.einsum("bn,bnp->b", W, ra * ra)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 1e-12, num / den, np.nan)


def twfe(data: PanelDataset, policy: str, n_boot: int = 999, seed: int = 0, level: float = 0.95) -> ComparatorResult:
    """OLS of the rate on the policy plus unit and period fixed effects."""
    A = _binary(data, policy)
    R = data.rate
    n = data.n_units
    point = _twfe_weighted(R, A, np.ones((1, n)))[0]
    if not np.isfinite(point):
        raise RankError("policy is collinear with the unit and period fixed effects", columns=(policy,))
    rng = np.random.default_rng(seed)
    boot = _twfe_weighted(R, A, _resample_counts(n, n_boot, rng)) if n_boot else np.zeros(0)
    warnings = []
    if n_boot and np.isnan(boot).any():
        warnings.append(f"{int(np.isnan(boot).sum())} bootstrap resamples were rank deficient and skipped")
    return ComparatorResult("twfe", float(point), _percentile(boot, level), n_boot=n_boot, warnings=warnings, boot=boot)


# -- group-time difference in differences -----------------------------------------------

def _did_cells(A: np.ndarray, horizon: int, T: int):
    G = np.where(A.any(axis=1), np.argmax(A > 0, axis=1), -1)
    never = np.iinfo(np.int64).max
    G_eff = np.where(G < 0, never, G)
    cells, warnings = [], []
    for g in sorted(set(G[G >= 0].tolist())):
        if g == 0:
            warnings.append("units treated in the first period have no base period; dropped")
            continue
        treated = G == g
        for e in range(horizon):
            t = g + e
            if t > T:
                break
            controls = (G_eff > t) & ~treated
            if not controls.any():
                warnings.append(f"cell (g={g}, t={t}) has no not-yet-treated controls; dropped")
                continue
            cells.append((g, t, e, treated, controls))
    return cells, warnings


def _did_weighted(R, cells, W):
    """Cell-weighted ATT aggregate for each row of unit weights ``W``."""
    num = np.zeros(W.shape[0])
    den = np.zeros(W.shape[0])
    atts = []
    for g, t, e, treated, controls in cells:
        d = R[:, t] - R[:, g - 1]
        wt = W @ treated.astype(float)
        wc = W @ controls.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            att = (W @ (d * treated)) / wt - (W @ (d * controls)) / wc
        ok = (wt > 0) & (wc > 0)
        att = np.where(ok, att, np.nan)
        atts.append(att)
        num += np.where(ok, wt * att, 0.0)
        den += np.where(ok, wt, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan), atts


def did_gt(
    data: PanelDataset, policy: str, horizon: int = 3, n_boot: int = 999, seed: int = 0, level: float = 0.95
) -> ComparatorResult:
    """``ATT(g, t)`` averaged over event times ``0..horizon-1``, weighted by group size."""
    A = _binary(data, policy)
    _absorbing(A, policy)
    if not A.any():
        raise EstimationError(f"no unit is ever treated under {policy!r}")
    R = data.rate
    cells, warnings = _did_cells(A, horizon, data.T)
    if not cells:
        raise EstimationError("every (g, t) cell was dropped; nothing to aggregate")
    n = data.n_units
    point, atts = _did_weighted(R, cells, np.ones((1, n)))
    detail = [
        {"g": int(g), "t": int(t), "event_time": int(e), "att": float(att[0]),
         "n_treated": int(tr.sum()), "n_controls": int(co.sum())}
        for (g, t, e, tr, co), att in zip(cells, atts)
    ]
    rng = np.random.default_rng(seed)
    boot = _did_weighted(R, cells, _resample_counts(n, n_boot, rng))[0] if n_boot else np.zeros(0)
    return ComparatorResult(
        "did_gt", float(point[0]), _percentile(boot, level), per_group_detail=detail,
        n_boot=n_boot, warnings=warnings, boot=boot,
    )


# -- synthetic control -----------------------------------------------------------------------

def simplex_weights(target, donors, penalty: float = 1e4) -> np.ndarray:
    """Nonnegative donor weights summing to one that best reproduce ``target``.

    ``target`` is ``(m,)`` and ``donors`` ``(m, J)``. The sum-to-one constraint
    enters as an extra least-squares row scaled by ``penalty`` relative to the
    donor scale, solved exactly by Lawson-Hanson NNLS, then renormalized.
    """
    target = np.asarray(target, dtype=float)
    donors = np.asarray(donors, dtype=float)
    m, J = donors.shape
    scale = penalty * max(float(np.abs(donors).max()), 1.0)
    lhs = np.vstack([donors, np.full((1, J), scale)])
    rhs = np.append(target, scale)
    try:
        w, _ = nnls(lhs, rhs, maxiter=50 * J)
    except RuntimeError as exc:
        raise EstimationError(f"donor weight solve failed: {exc}") from exc
    total = w.sum()
    if total <= 0:
        raise EstimationError("donor weights collapsed to zero")
    return w / total


def synth(
    data: PanelDataset,
    policy: str,
    horizon: int = 3,
    n_boot: int = 999,
    seed: int = 0,
    level: float = 0.95,
    min_pre: int = 3,
    min_donors: int = 2,
    penalty: float = 1e4,
) -> ComparatorResult:
    """Average over treated units of observed minus synthetic outcomes.

    Donors for a unit adopting at ``T_i`` are units never treated or adopting
    after ``T_i + horizon - 1``. Units with fewer than ``min_pre`` pre-periods
    or ``min_donors`` donors are dropped. The aggregate is the mean over
    contributing unit-periods; the interval resamples treated units.
    """
    A = _binary(data, policy)
    _absorbing(A, policy)
    R = data.rate
    n, P = R.shape
    G = np.where(A.any(axis=1), np.argmax(A > 0, axis=1), -1)
    last = G + horizon - 1
    warnings, rows = [], []
    for i in np.flatnonzero(G >= 0):
        g = int(G[i])
        donors = (G < 0) | (G > last[i])
        donors[i] = False
        if g < min_pre:
            warnings.append(f"unit {data.units[i]!r} has {g} pre-periods (< {min_pre}); dropped")
            continue
        if donors.sum() < min_donors:
            warnings.append(f"unit {data.units[i]!r} has {int(donors.sum())} donors (< {min_donors}); dropped")
            continue
        rows.append((i, g, donors))
    if not rows:
        raise InsufficientHistoryError("no treated unit has enough pre-periods and donors")
    W = np.zeros((len(rows), n))
    for b, (i, g, donors) in enumerate(rows):
        W[b, donors] = simplex_weights(R[i, :g], R[donors, :g].T, penalty)
    effects, counts, detail = [], [], []
    for b, (i, g, donors) in enumerate(rows):
        ts = np.arange(g, min(g + horizon, P))
        gap = R[i, ts] - R[:, ts].T @ W[b]
        pre_gap = R[i, :g] - R[:, :g].T @ W[b]
        effects.append(gap.mean())
        counts.append(len(ts))
        detail.append({
            "unit": data.units[i], "adoption": g, "effect": float(gap.mean()), "n_periods": len(ts),
            "pre_rmse": float(np.sqrt(np.mean(pre_gap**2))),
            "weights": {data.units[j]: float(W[b, j]) for j in np.flatnonzero(W[b] > 1e-8)},
        })
    effects, counts = np.array(effects), np.array(counts, dtype=float)
    point = float(effects @ counts / counts.sum())
    rng = np.random.default_rng(seed)
    if n_boot:
        idx = rng.integers(0, len(rows), size=(n_boot, len(rows)))
        boot = (effects[idx] * counts[idx]).sum(axis=1) / counts[idx].sum(axis=1)
    else:
        boot = np.zeros(0)
    return ComparatorResult(
        "synth", point, _percentile(boot, level), per_group_detail=detail, n_boot=n_boot,
        warnings=warnings, boot=boot,
    )
