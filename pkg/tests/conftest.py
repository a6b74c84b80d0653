"""Shared generators and fixtures.

The generators here are written independently of ``dampanel.sim`` so model
recovery tests do not check the library against its own simulator.
"""

from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.special import expit

from dampanel.panel import PanelDataset

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def linear_panel(
    rng,
    n=51,
    T=16,
    alpha=0.2,
    delta=0.6,
    effect=-0.5,
    sigma=0.3,
    assignment="staggered",
    propensity=(-0.5, 1.5),
    start=(3, None),
    treated_share=0.5,
):
    """AR(1) rate panel with a constant effect and debiased lags.

    Returns the panel and the untreated counterfactual ``Y0`` per cell. With
    ``assignment="bernoulli"`` the exposure is redrawn each period with
    probability ``expit(b0 + b1 * (Y0_{t-1} - mean))``.
    """
    rng = np.random.default_rng(rng)
    P = T + 1
    A = np.zeros((n, P))
    if assignment == "staggered":
        lo, hi = start[0], start[1] if start[1] is not None else T
        adopt = rng.integers(lo, hi + 1, n)
        for i in np.flatnonzero(rng.random(n) < treated_share):
            A[i, adopt[i]:] = 1
    center = alpha / (1 - delta)
    Y = np.zeros((n, P))
    Y0 = np.zeros((n, P))
    Y[:, 0] = Y0[:, 0] = center + rng.normal(0, sigma / np.sqrt(1 - delta**2), n)
    for t in range(1, P):
        y0_prev = Y[:, t - 1] - effect * A[:, t - 1]
        if assignment == "bernoulli":
            A[:, t] = rng.random(n) < expit(propensity[0] + propensity[1] * (y0_prev - center))
        Y0[:, t] = alpha + delta * y0_prev + rng.normal(0, sigma, n)
        Y[:, t] = Y0[:, t] + effect * A[:, t]
    data = PanelDataset(units=[f"u{i:03d}" for i in range(n)], outcome=Y, policies={"treat": A})
    return data, Y0


def count_panel(rng, n=200, T=16, alpha=1.0, delta=0.7, effect=-0.3, dispersion=0.05, pop=1e4, shift=1.0):
    """Negative binomial counts with a log-link DAM mean and staggered adoption."""
    rng = np.random.default_rng(rng)
    P = T + 1
    A = np.zeros((n, P))
    adopt = rng.integers(3, T + 1, n)
    for i in np.flatnonzero(rng.random(n) < 0.5):
        A[i, adopt[i]:] = 1
    population = np.full((n, P), pop)
    C = np.zeros((n, P))
    C[:, 0] = rng.poisson(np.exp(alpha / (1 - delta)) * pop, n)
    r = 1.0 / dispersion
    for t in range(1, P):
        lag = np.log((C[:, t - 1] + shift) / population[:, t - 1]) - effect * A[:, t - 1]
        mu = np.exp(alpha + delta * lag + effect * A[:, t] + np.log(population[:, t]))
        C[:, t] = rng.negative_binomial(r, r / (r + mu))
    return PanelDataset(units=[f"u{i:03d}" for i in range(n)], outcome=C, policies={"treat": A}, population=population)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_panel():
    data, _ = linear_panel(7, n=40, T=12)
    return data


# -- acceptance reporting -----------------------------------------------------------------------

ACCEPTANCE: dict = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> bool:
    """Store one acceptance sub-result for the end-of-run summary."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {criterion}: {status}")
        for part, ok, detail in parts:
            terminalreporter.write_line(f"    {part}: {'PASS' if ok else 'FAIL'}  {detail}")
