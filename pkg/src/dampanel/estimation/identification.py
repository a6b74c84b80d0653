"""Plug-in of the outcome-regression identification formula.

For each period ``t`` the arm-specific regressions ``mu_a(y) = E[Y_t | A_t = a,
y* = y]`` are fitted by OLS on the debiased lag ``y* = Y_{t-1} - A_{t-1}
Delta_{t-1}`` and the effect is the sample mean of ``mu_1(y*) - mu_0(y*)``.
``Delta_{t-1}`` is supplied by the caller, so this is an oracle check of the
identification argument rather than an estimator.
"""

from __future__ import annotations

import numpy as np

from ..errors import PositivityError
from ..panel import PanelDataset


def _arm_fit(ystar, y):
    X = np.column_stack([np.ones_like(ystar), ystar])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def plugin_effect(data: PanelDataset, policy: str, previous_effect, times=None) -> dict:
    """Per-period and averaged plug-in effects on the rate scale.

    Parameters
    ----------
    previous_effect
        ``Delta_{t-1}``: a scalar (time-homogeneous) or a mapping from ``t`` to
        the effect at ``t - 1``.
    """
    A = data.policy(policy)
    R = data.rate
    times = range(1, data.n_periods) if times is None else times
    per_period = {}
    for t in times:
        d_prev = previous_effect[t] if isinstance(previous_effect, dict) else float(previous_effect)
        ystar = R[:, t - 1] - A[:, t - 1] * d_prev
        treated = A[:, t] == 1
        if treated.sum() < 2 or (~treated).sum() < 2:
            raise PositivityError(f"time {t} needs at least two units in each arm", time=int(t))
        c1 = _arm_fit(ystar[treated], R[treated, t])
        c0 = _arm_fit(ystar[~treated], R[~treated, t])
        per_period[int(t)] = float(np.mean((c1[0] - c0[0]) + (c1[1] - c0[1]) * ystar))
    return {"per_period": per_period, "effect": float(np.mean(list(per_period.values())))}
