"""Bias of the autoregressive effect estimate under effect heterogeneity.

Adjusting for the debiased lag ``Y_{t-1} - A_{t-1} Delta`` instead of the
control counterfactual ``Y_{t-1}(0)`` amounts to adjusting for ``W = Y_{t-1}(0)
+ U`` with ``U = A_{t-1}(Delta_{i,t-1} - Delta)``. The probability limit of the
OLS coefficient on ``A_t`` in a regression of ``Y_t`` on ``(1, A_t, W)`` is
evaluated here from population moments.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DomainError, InconsistentMomentsError, SchemaError, SingularityError
from .panel import PanelDataset

_PSD_TOL = 1e-12


@dataclass(frozen=True)
class MomentInputs:
    """Population moments; every field is optional and checked where used.

    ``Y`` is the outcome at ``t``, ``Y0`` the control counterfactual at
    ``t - 1``, ``A`` the exposure at ``t`` and ``U`` the proxy error at ``t - 1``.
    """

    var_U: float | None = None
    resid_var_Y0_given_A: float | None = None
    gamma_A: float | None = None
    delta: float | None = None
    Delta: float | None = None
    cov_A_Y: float | None = None
    cov_A_Y0: float | None = None
    cov_Y_Y0: float | None = None
    cov_Y_U: float | None = None
    cov_A_U: float | None = None
    cov_U_Y0: float | None = None
    var_A: float | None = None
    var_Y0: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                v = float(v)
                if not math.isfinite(v):
                    raise DomainError(f"{f.name} must be finite")
                object.__setattr__(self, f.name, v)
        for name in ("var_U", "var_A", "var_Y0"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise DomainError(f"{name} must be nonnegative, got {v}")
        if self.resid_var_Y0_given_A is not None and self.resid_var_Y0_given_A <= 0:
            raise DomainError("resid_var_Y0_given_A must be positive")
        self._check_blocks()

    def _check_blocks(self):
        pairs = [
            ("var_A", "var_Y0", "cov_A_Y0"),
            ("var_A", "var_U", "cov_A_U"),
            ("var_U", "var_Y0", "cov_U_Y0"),
        ]
        for va, vb, c in pairs:
            a, b, cv = getattr(self, va), getattr(self, vb), getattr(self, c)
            if None not in (a, b, cv) and cv * cv > a * b * (1 + 1e-9) + _PSD_TOL:
                raise InconsistentMomentsError(f"{c}^2 exceeds {va} * {vb}; covariance block is not PSD")
        if None not in (self.var_A, self.var_Y0, self.var_U):
            vw = self.var_W
            caw = (self.cov_A_Y0 or 0.0) + (self.cov_A_U or 0.0)
            if vw < -_PSD_TOL or caw * caw > self.var_A * vw * (1 + 1e-9) + _PSD_TOL:
                raise InconsistentMomentsError("moments of (A, Y0 + U) are not PSD")

    @property
    def var_W(self) -> float:
        """``Var(Y0 + U)``."""
        self.require("var_Y0", "var_U")
        return self.var_Y0 + self.var_U + 2 * (self.cov_U_Y0 or 0.0)

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise SchemaError(f"moment inputs missing: {missing}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d) -> "MomentInputs":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise SchemaError(f"unknown moment keys: {sorted(extra)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "MomentInputs":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_structural(
        cls,
        delta,
        Delta,
        var_A,
        cov_A_Y0,
        var_Y0,
        var_U,
        cov_Y_U=0.0,
        cov_A_U=0.0,
        cov_U_Y0=0.0,
    ) -> "MomentInputs":
        """Moments implied by ``Y_t = alpha + delta Y0 + Delta A_t + e``.

        ``cov_Y_U`` is taken as given (it arises through ``e``), the rest of the
        outcome moments follow from the structural equation.
        """
        if var_A <= 0:
            raise DomainError("var_A must be positive")
        resid = var_Y0 - cov_A_Y0**2 / var_A
        return cls(
            var_U=var_U,
            resid_var_Y0_given_A=resid,
            gamma_A=cov_A_Y0 / var_A,
            delta=delta,
            Delta=Delta,
            cov_A_Y=delta * cov_A_Y0 + Delta * var_A,
            cov_A_Y0=cov_A_Y0,
            cov_Y_Y0=delta * var_Y0 + Delta * cov_A_Y0,
            cov_Y_U=cov_Y_U,
            cov_A_U=cov_A_U,
            cov_U_Y0=cov_U_Y0,
            var_A=var_A,
            var_Y0=var_Y0,
        )


def moments_from_samples(A, Y, Y0_lag, U, delta=None, Delta=None) -> MomentInputs:
    """Sample moments from simulated draws that record the counterfactual."""
    A, Y, Y0_lag, U = (np.asarray(v, dtype=float).ravel() for v in (A, Y, Y0_lag, U))
    C = np.cov(np.vstack([A, Y, Y0_lag, U]))
    var_A, var_Y0 = C[0, 0], C[2, 2]
    return MomentInputs(
        var_U=C[3, 3],
        resid_var_Y0_given_A=var_Y0 - C[0, 2] ** 2 / var_A,
        gamma_A=C[0, 2] / var_A,
        delta=delta,
        Delta=Delta,
        cov_A_Y=C[0, 1],
        cov_A_Y0=C[0, 2],
        cov_Y_Y0=C[1, 2],
        cov_Y_U=C[1, 3],
        cov_A_U=C[0, 3],
        cov_U_Y0=C[2, 3],
        var_A=var_A,
        var_Y0=var_Y0,
    )


def classical_bias(m: MomentInputs) -> dict:
    """Expected estimate and bias when ``U`` is independent of everything else."""
    m.require("var_U", "resid_var_Y0_given_A", "gamma_A", "delta", "Delta")
    differential = {n: getattr(m, n) for n in ("cov_Y_U", "cov_A_U", "cov_U_Y0") if getattr(m, n)}
    if differential:
        raise SchemaError(f"nonzero differential covariances {differential}; use general_bias")
    frac = m.var_U / (m.var_U + m.resid_var_Y0_given_A)
    bias = m.delta * m.gamma_A * frac
    return {"expected": m.Delta + bias, "bias": bias, "attenuation_fraction": frac}


def bias_bound(delta: float, gamma_A: float, k_ratio: float) -> float:
    """``|delta gamma_A| k / (k + 1)`` for ``Var(U) <= k * resid_var``."""
    if not k_ratio > 0:
        raise DomainError(f"k_ratio must be positive, got {k_ratio}")
    return abs(delta * gamma_A) * k_ratio / (k_ratio + 1)


# alias under the interface name existing callers use
proposition1_bound = bias_bound


def general_bias(m: MomentInputs) -> dict:
    """Probability limit of the effect estimate under arbitrary proxy error.

    When ``cov_A_U == 0`` the numerator is split into ``C1 = Cov(A, Y)``,
    ``C2 = -Cov(A, Y0) Cov(Y, Y0) / Var(W)`` and ``C3 = -Cov(A, Y0) Cov(Y, U) /
    Var(W)`` (``Y0`` taken at ``t - 1`` throughout).
    """
    m.require("cov_A_Y", "cov_A_Y0", "cov_Y_Y0", "var_A", "var_Y0", "var_U")
    cov_Y_U = m.cov_Y_U or 0.0
    cov_A_U = m.cov_A_U or 0.0
    vw = m.var_W
    if vw <= 0:
        raise SingularityError("Var(Y0 + U) is zero")
    cov_AW = m.cov_A_Y0 + cov_A_U
    cov_YW = m.cov_Y_Y0 + cov_Y_U
    denom = m.var_A - cov_AW**2 / vw
    if denom <= 1e-14 * max(m.var_A, 1e-300):
        raise SingularityError("Var(A) is fully explained by the adjustment variable")
    numer = m.cov_A_Y - cov_AW * cov_YW / vw
    expected = numer / denom
    out = {"expected": expected, "denominator": denom}
    if m.Delta is not None:
        out["bias"] = expected - m.Delta
    if cov_A_U == 0:
        c1 = m.cov_A_Y
        c2 = -m.cov_A_Y0 * m.cov_Y_Y0 / vw
        c3 = -m.cov_A_Y0 * cov_Y_U / vw
        out.update(
            C1=c1,
            C2=c2,
            C3=c3,
            C3_over_C2=(cov_Y_U / m.cov_Y_Y0) if m.cov_Y_Y0 != 0 else float("nan"),
            differential_part=c3 / denom,
        )
    return out


def projection_decompose(var_U: float, cov_U_Y0: float, var_Y0: float) -> tuple[float, str]:
    """Variance of ``U`` after removing its projection on ``Y0``."""
    if var_U < 0 or var_Y0 < 0:
        raise DomainError("variances must be nonnegative")
    if cov_U_Y0**2 > var_U * var_Y0 * (1 + 1e-9) + _PSD_TOL:
        raise InconsistentMomentsError("|cov_U_Y0| exceeds sqrt(var_U * var_Y0)")
    if var_Y0 == 0:
        star = var_U
    else:
        star = max(0.0, var_U - cov_U_Y0**2 / var_Y0)
    star = min(star, var_U)
    note = (
        "no correlation with Y0; error variance unchanged"
        if cov_U_Y0 == 0
        else f"projection on Y0 removes {var_U - star:.6g} of the error variance"
    )
    return star, note


def variance_diagnostic(data: PanelDataset, policy: str, threshold: float = 1.2) -> dict:
    """Rate-scale outcome variance in treated versus control unit-periods.

    The adjusted ratio uses residuals from a regression of the rate on period
    dummies and the treatment indicator, so common trends and a constant effect
    do not register as heterogeneity. A ratio above ``threshold`` is flagged;
    this is a descriptive caution, not a test.
    """
    A = data.policy(policy) > 0
    R = data.rate
    n_t, n_c = int(A.sum()), int((~A).sum())
    if n_t < 2 or n_c < 2:
        raise DomainError(f"need at least two treated and two control cells, have {n_t} and {n_c}")
    var_t = float(np.var(R[A], ddof=1))
    var_c = float(np.var(R[~A], ddof=1))
    n, P = R.shape
    X = np.column_stack([np.tile(np.eye(P), (n, 1)), A.ravel().astype(float)])
    coef, *_ = np.linalg.lstsq(X, R.ravel(), rcond=None)
    resid = (R.ravel() - X @ coef).reshape(n, P)
    adj_t = float(np.var(resid[A], ddof=1))
    adj_c = float(np.var(resid[~A], ddof=1))
    ratio = var_t / var_c if var_c > 0 else float("inf")
    adj_ratio = adj_t / adj_c if adj_c > 0 else float("inf")
    return {
        "var_treated": var_t,
        "var_control": var_c,
        "ratio": ratio,
        "var_treated_adjusted": adj_t,
        "var_control_adjusted": adj_c,
        "adjusted_ratio": adj_ratio,
        "n_treated_cells": n_t,
        "n_control_cells": n_c,
        "threshold": threshold,
        "flag": bool(adj_ratio > threshold),
    }
