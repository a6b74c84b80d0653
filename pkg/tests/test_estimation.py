import json

import numpy as np
import pytest

from conftest import count_panel, linear_panel
from dampanel.errors import DomainError, InsufficientHistoryError, PositivityError, RankError, SchemaError
from dampanel.estimation import SamplerConfig, fit_bayes, fit_ipw, fit_mle, plugin_effect
from dampanel.estimation.results import FreqFit, PosteriorFit, fit_from_json_dict
from dampanel.model import ModelSpec
from dampanel.panel import PanelDataset, lag_frame

QUICK = SamplerConfig(n_iter=3000, burn_in=1500, thin=1, seed=3)


@pytest.fixture(scope="module")
def panel_300():
    data, _ = linear_panel(11, n=300, T=16)
    return data


@pytest.fixture(scope="module")
def mle_300(panel_300):
    return fit_mle(panel_300, ModelSpec())


@pytest.fixture(scope="module")
def bayes_300(panel_300):
    return fit_bayes(panel_300, ModelSpec(), QUICK)


# -- profiled estimator ---------------------------------------------------------------

@pytest.mark.parametrize("theta", [0.0, -0.37])
def test_fixed_effects_reduce_to_least_squares(theta):
    data, _ = linear_panel(2, n=80, T=10)
    rng = np.random.default_rng(0)
    x = rng.normal(size=data.outcome.shape)
    data = data.evolve(covariates={"x": x})
    spec = ModelSpec(k=2, l=0, covariates=("x",))
    fit = fit_mle(data, spec, fixed_effects=[theta])
    frame = lag_frame(data, 2, 0)
    a = frame.policy_lags["treat"]
    y = frame.y - theta * a[:, 0]
    X = np.column_stack([np.ones(frame.n_rows), frame.y_lags - theta * a[:, 1:3], frame.covariates["x"]])
    ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    got = [fit.named()[n] for n in ("alpha", "delta_1", "delta_2", "gamma_x")]
    np.testing.assert_allclose(got, ols, atol=1e-8)
    assert fit.named()["theta_0"] == theta


def test_sandwich_matches_ols_variance_under_homoskedasticity():
    data, _ = linear_panel(3, n=2000, T=8, effect=0.0)
    fit = fit_mle(data, ModelSpec(), fixed_effects=[0.0], cluster=None)
    frame = lag_frame(data, 1, 0)
    X = np.column_stack([np.ones(frame.n_rows), frame.y_lags])
    coef, *_ = np.linalg.lstsq(X, frame.y, rcond=None)
    resid = frame.y - X @ coef
    ols_var = resid @ resid / (len(resid) - 2) * np.linalg.inv(X.T @ X)
    for j, name in enumerate(("alpha", "delta_1")):
        ratio = fit.vcov[fit.index(name), fit.index(name)] / ols_var[j, j]
        assert 0.9 < ratio < 1.1


def test_mle_recovers_parameters(mle_300):
    truth = {"alpha": 0.2, "delta_1": 0.6, "theta_0": -0.5, "sigma2": 0.09}
    assert mle_300.convergence["converged"]
    for name, value in truth.items():
        assert abs(mle_300.named()[name] - value) < 3 * mle_300.se[mle_300.index(name)], name


def test_vcov_is_symmetric_psd(mle_300):
    V = mle_300.vcov
    np.testing.assert_allclose(V, V.T, atol=0)
    assert np.linalg.eigvalsh(V).min() > -1e-12


def test_mle_invariant_to_unit_relabeling(panel_300, mle_300):
    order = np.random.default_rng(1).permutation(panel_300.n_units)
    again = fit_mle(panel_300.permute_units(order), ModelSpec())
    np.testing.assert_allclose(again.coef, mle_300.coef, rtol=1e-7, atol=1e-9)


def test_count_model_recovery():
    data = count_panel(2)
    truth = {"alpha": 1.0, "delta_1": 0.7, "theta_0": -0.3, "dispersion": 0.05}
    fit = fit_mle(data, ModelSpec(family="log_link"))
    for name, value in truth.items():
        assert abs(fit.named()[name] - value) < 3 * fit.se[fit.index(name)], name
    poisson = fit_mle(data, ModelSpec(family="log_link", count_model="poisson"))
    assert "dispersion" not in poisson.named()
    assert abs(poisson.named()["theta_0"] + 0.3) < 3 * poisson.se[poisson.index("theta_0")]


def test_collinear_covariates_raise_rank_error():
    data, _ = linear_panel(1, n=60)
    x = np.random.default_rng(0).normal(size=data.outcome.shape)
    data = data.evolve(covariates={"x": x, "x2": 2 * x})
    with pytest.raises(RankError) as err:
        fit_mle(data, ModelSpec(covariates=("x", "x2")))
    assert set(err.value.columns) & {"x", "x2"}


def test_no_fitable_rows_is_refused():
    data = PanelDataset(units=["a", "b"], outcome=np.ones((2, 5)), policies={"treat": np.zeros((2, 5))})
    spec = ModelSpec(k=2, l=2)
    with pytest.raises(InsufficientHistoryError):
        fit_mle(data, spec)
    with pytest.raises(InsufficientHistoryError):
        fit_bayes(data, spec, QUICK)


def test_freq_fit_json_round_trip(mle_300):
    blob = json.loads(json.dumps(mle_300.to_json_dict()))
    back = FreqFit.from_json_dict(blob)
    np.testing.assert_array_equal(back.coef, mle_300.coef)
    np.testing.assert_array_equal(back.vcov, mle_300.vcov)
    assert back.spec == mle_300.spec


# -- posterior sampler --------------------------------------------------------------------

def test_posterior_support(bayes_300):
    d = bayes_300.column("delta_1")
    assert np.all((d >= 0) & (d <= 1))
    assert np.all(bayes_300.column("sigma2") > 0)
    assert bayes_300.draws.shape == (1500, 4)


def test_posterior_agrees_with_mle(bayes_300, mle_300):
    for name in mle_300.param_names:
        j = mle_300.index(name)
        assert abs(bayes_300.mean[j] - mle_300.coef[j]) < 0.5 * mle_300.se[j], name


def test_acceptance_rates_within_target(bayes_300):
    rates = bayes_300.diagnostics["block_acceptance"]
    for block, rate in rates.items():
        assert 0.1 < rate < 0.6, block


def test_sampler_is_reproducible():
    data, _ = linear_panel(5, n=40, T=10)
    cfg = SamplerConfig(n_iter=600, burn_in=300, seed=9)
    a = fit_bayes(data, ModelSpec(), cfg)
    b = fit_bayes(data, ModelSpec(), cfg)
    assert a.draws.tobytes() == b.draws.tobytes()
    c = fit_bayes(data, ModelSpec(), SamplerConfig(n_iter=600, burn_in=300, seed=10))
    assert a.draws.tobytes() != c.draws.tobytes()


def test_count_posterior_support():
    data = count_panel(4, n=60, T=10)
    fit = fit_bayes(data, ModelSpec(family="log_link"), SamplerConfig(n_iter=1500, burn_in=750, seed=1))
    assert np.all(fit.column("dispersion") > 0)
    assert np.all((fit.column("delta_1") >= 0) & (fit.column("delta_1") <= 1))


def test_sampler_config_validation():
    with pytest.raises(SchemaError):
        SamplerConfig(n_iter=100, burn_in=100)
    with pytest.raises(SchemaError):
        SamplerConfig(thin=0)


def test_posterior_json_and_draws_round_trip(tmp_path, bayes_300):
    bayes_300.write_draws_csv(tmp_path / "draws.csv")
    blob = json.loads(json.dumps(bayes_300.to_json_dict("draws.csv")))
    back = fit_from_json_dict(blob, tmp_path)
    assert isinstance(back, PosteriorFit)
    np.testing.assert_array_equal(back.draws, bayes_300.draws)
    header = (tmp_path / "draws.csv").read_text().splitlines()[0]
    assert header == "alpha,delta_1,theta_0,sigma2"


# -- estimating equations ---------------------------------------------------------------------

def test_ipw_positivity_error_names_time():
    data, _ = linear_panel(1, n=30, T=6)
    A = np.ones(data.outcome.shape)
    with pytest.raises(PositivityError) as err:
        fit_ipw(data.with_policy("treat", A))
    assert err.value.time == 1


def test_ipw_rejects_fractional_policy():
    data, _ = linear_panel(1, n=30, T=6)
    with pytest.raises(DomainError):
        fit_ipw(data.with_policy("treat", np.full(data.outcome.shape, 0.5)))


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_ipw_and_mle_agree(link):
    data, _ = linear_panel(8, n=400, T=12, assignment="bernoulli")
    ipw = fit_ipw(data, link=link)
    mle = fit_mle(data, ModelSpec())
    assert ipw.convergence["converged"]
    d_ipw, d_mle = ipw.named()["theta_0"], mle.named()["theta_0"]
    joint = np.hypot(ipw.se[ipw.index("theta_0")], mle.se[mle.index("theta_0")])
    assert abs(d_ipw - d_mle) < 3 * joint
    assert abs(d_ipw + 0.5) < 3 * ipw.se[ipw.index("theta_0")]


def test_plugin_effect_with_true_previous_effect():
    data, _ = linear_panel(6, n=2000, T=6, assignment="bernoulli")
    out = plugin_effect(data, "treat", -0.5)
    assert set(out["per_period"]) == set(range(1, 7))
    assert abs(out["effect"] + 0.5) < 0.03


def test_plugin_effect_needs_both_arms():
    data, _ = linear_panel(6, n=20, T=4)
    with pytest.raises(PositivityError):
        plugin_effect(data.with_policy("treat", np.zeros(data.outcome.shape)), "treat", 0.0)
