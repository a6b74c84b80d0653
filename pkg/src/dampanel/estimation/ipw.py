"""Inverse-probability-weighted estimating-equation fit for one binary policy.

The effect ``Delta`` and a propensity model for ``A_t`` given the debiased
lag ``y* = Y_{t-1} - A_{t-1} Delta`` are solved jointly::

    Y_t [A_t / e(y*) - (1 - A_t) / (1 - e(y*))] - Delta = 0
    score of the binary regression of A_t on (1, y*) = 0
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ..errors import ConvergenceError, DomainError, PositivityError, SchemaError
from ..panel import PanelDataset
from .results import FreqFit
from .sandwich import numerical_jacobian, sandwich

IPW_NAMES = ("theta_0", "ps_intercept", "ps_slope")


def _propensity(eta, link):
    if link == "logit":
        return expit(eta)
    return norm.cdf(eta)


def ipw_rows(x, y, a, y_lag, a_lag, link="logit"):
    """``(N, 3)`` stacked estimating functions at ``x = (Delta, b0, b1)``."""
    delta, b0, b1 = x
    ystar = y_lag - a_lag * delta
    eta = b0 + b1 * ystar
    e = np.clip(_propensity(eta, link), 1e-12, 1 - 1e-12)
    psi = y * (a / e - (1 - a) / (1 - e)) - delta
    if link == "logit":
        w = a - e
    else:
        w = norm.pdf(eta) * (a - e) / (e * (1 - e))
    return np.column_stack([psi, w, w * ystar])


def fit_ipw(
    data: PanelDataset,
    policy: str | None = None,
    link: str = "logit",
    times=None,
    cluster: str | None = "unit",
    tol: float = 1e-10,
    max_iter: int = 100,
) -> FreqFit:
    """Solve the stacked IPW equations by damped Newton from zero.

    Outcomes enter on the rate scale. ``times`` restricts the pooled periods
    (default: every ``t >= 1``); each used period needs treated and untreated
    units.
    """
    if link not in ("logit", "probit"):
        raise SchemaError(f"link must be 'logit' or 'probit', got {link!r}")
    if policy is None:
        if len(data.policies) != 1:
            raise SchemaError("name the policy when the panel carries several")
        policy = next(iter(data.policies))
    A = data.policy(policy)
    if not np.all((A == 0) | (A == 1)):
        raise DomainError(f"policy {policy!r} must be binary; dichotomize it first")
    times = np.arange(1, data.n_periods) if times is None else np.asarray(sorted(times), dtype=int)
    if len(times) == 0 or times.min() < 1 or times.max() > data.T:
        raise SchemaError(f"times must lie in 1..{data.T}")
    for t in times:
        share = A[:, t].mean()
        if share == 0 or share == 1:
            raise PositivityError(f"no overlap at time {int(t)}: every unit has the same exposure", time=int(t))
    R = data.rate
    ui = np.repeat(np.arange(data.n_units), len(times))
    ti = np.tile(times, data.n_units)
    args = (R[ui, ti], A[ui, ti], R[ui, ti - 1], A[ui, ti - 1], link)

    def mean_eq(x):
        return ipw_rows(x, *args).mean(axis=0)

    x = np.zeros(3)
    f = mean_eq(x)
    it = 0
    for it in range(1, max_iter + 1):
        J = numerical_jacobian(mean_eq, x, steps=np.full(3, 1e-6))
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
        t = 1.0
        norm0 = np.linalg.norm(f)
        while True:
            cand = x + t * step
            f_new = mean_eq(cand)
            if np.linalg.norm(f_new) < (1 - 1e-4 * t) * norm0 or t < 1e-6:
                break
            t *= 0.5
        x, f = cand, f_new
        if np.max(np.abs(t * step)) < tol and np.linalg.norm(f) < 1e-8:
            break
    else:
        raise ConvergenceError("IPW Newton iteration did not converge", last_iterate=x, iterations=max_iter)
    if not np.all(np.isfinite(x)) or np.linalg.norm(f) > 1e-6:
        raise ConvergenceError("IPW Newton iteration did not reach a root", last_iterate=x, iterations=it)
    clusters = ui if cluster == "unit" else None
    vcov = sandwich(lambda v: ipw_rows(v, *args), x, clusters=clusters, steps=np.full(3, 1e-6))
    return FreqFit(
        method="ipw",
        param_names=IPW_NAMES,
        coef=x,
        vcov=vcov,
        convergence={"converged": True, "iterations": it, "grad_norm": float(np.linalg.norm(f))},
        spec=None,
        n_obs=len(ui),
        extra={"policy": policy, "link": link, "times": [int(t) for t in times], "cluster": cluster},
    )
