"""Adaptive random-walk Metropolis-within-Gibbs sampler for a DAM.

Priors: ``delta_b ~ U(0, 1)``; intercept, policy effects and covariate
coefficients ``N(0, prior_var)``; ``sigma2`` (linear) or ``dispersion``
(negative binomial) ``InvGamma(ig_shape, ig_rate)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaln

from ..errors import InsufficientHistoryError, MixingError, SchemaError
from ..model import ModelSpec, build_design, param_names
from ..panel import PanelDataset
from .mle import _fixed_part, _Profile, nb_loglik_rows
from .results import PosteriorFit


@dataclass(frozen=True)
class SamplerConfig:
    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 2
    seed: int = 0
    prior_var: float = 100.0
    ig_shape: float = 0.001
    ig_rate: float = 0.001
    adapt_every: int = 50
    target_accept: tuple = (0.2, 0.4)
    initial_step: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "target_accept", tuple(float(v) for v in self.target_accept))
        if self.n_iter < 1 or self.thin < 1 or self.burn_in < 0:
            raise SchemaError("n_iter and thin must be positive and burn_in nonnegative")
        if self.burn_in >= self.n_iter:
            raise SchemaError(f"burn_in ({self.burn_in}) must be smaller than n_iter ({self.n_iter})")
        lo, hi = self.target_accept
        if not 0 < lo < hi < 1:
            raise SchemaError("target_accept must satisfy 0 < lo < hi < 1")
        if self.prior_var <= 0 or self.ig_shape <= 0 or self.ig_rate <= 0:
            raise SchemaError("prior parameters must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_accept"] = list(self.target_accept)
        return d

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown sampler keys: {sorted(extra)}")
        return cls(**dict(d))


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from Geyer's initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return float(n)
    z = x - x.mean()
    f = np.fft.rfft(z, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = -1.0
    for m in range(0, n - 1, 2):
        pair = acf[m] + acf[m + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(n / max(tau, 1.0 / n))


class _RandomWalk:
    """Gaussian random-walk block with a scale tuned during burn-in."""

    def __init__(self, cov: np.ndarray, target: tuple, initial_scale: float):
        self.chol = np.linalg.cholesky(cov + 1e-14 * np.eye(len(cov)))
        self.log_scale = np.log(initial_scale)
        self.target = target
        self.window_acc = 0
        self.window_n = 0
        self.total_acc = 0
        self.total_n = 0
        self.history = []

    def propose(self, x, rng):
        return x + np.exp(self.log_scale) * (self.chol @ rng.standard_normal(len(x)))

    def record(self, accepted: bool, adapting: bool):
        self.window_acc += accepted
        self.window_n += 1
        if not adapting:
            self.total_acc += accepted
            self.total_n += 1

    def adapt(self, x):
        self.history.append(np.array(x))
        rate = self.window_acc / max(self.window_n, 1)
        lo, hi = self.target
        if rate < lo:
            self.log_scale -= 0.3 if rate > 0 else 1.0
        elif rate > hi:
            self.log_scale += 0.3
        self.window_acc = self.window_n = 0

    def learn_covariance(self):
        """Replace the proposal shape by the burn-in sample covariance."""
        H = np.array(self.history)
        if len(H) < 4 * H.shape[1] + 4:
            return
        C = np.cov(H.T).reshape(H.shape[1], H.shape[1])
        d = H.shape[1]
        try:
            self.chol = np.linalg.cholesky(C * 2.38**2 / d + 1e-12 * np.eye(d))
            self.log_scale = 0.0
        except np.linalg.LinAlgError:
            pass

    @property
    def acceptance(self) -> float:
        return float(self.total_acc / self.total_n) if self.total_n else float("nan")


def fit_bayes(data: PanelDataset, spec: ModelSpec, config: SamplerConfig | None = None) -> PosteriorFit:
    """Sample the posterior of every parameter in ``spec``.

    The ``(delta, effects)`` block moves by random walk; each move shifts the
    intercept by ``-sum_b (delta_b' - delta_b) * mean(lag_b)`` so that the
    fitted level stays put (the map is volume preserving and its own inverse
    under a sign flip, so the proposal stays symmetric). In the linear family
    the intercept/covariate block and ``sigma2`` are drawn from their
    conditionals; in the log-link family they move by random walk.
    """
    config = config or SamplerConfig()
    design = build_design(data, spec)
    names = param_names(spec)
    N = design.n_rows
    if N <= len(names):
        raise InsufficientHistoryError(
            f"{N} fitable rows cannot inform {len(names)} parameters; refusing a prior-only posterior"
        )
    rng = np.random.default_rng(config.seed)
    k, m = spec.k, spec.n_effects
    prof = _Profile(design)
    Q = prof.Q
    pv = config.prior_var
    lag_means = design.lags.mean(axis=0)
    linear = spec.family == "linear"
    negbin = prof.negbin

    dt = np.concatenate([np.full(k, 0.5), np.zeros(m)])
    beta, log_r, _ = prof.inner(dt)
    if linear:
        resid = design.y - _fixed_part(design, dt[:k], dt[k:]) - Q @ beta
        sigma2 = float(resid @ resid / N)
        y_scale = float(np.std(design.y)) or 1.0
        dt_cov = np.diag(np.concatenate([np.full(k, config.initial_step**2), np.full(m, (0.1 * y_scale) ** 2)]))
    else:
        sigma2 = None
        dt_cov = np.diag(np.full(k + m, config.initial_step**2))
        mu = np.exp(_fixed_part(design, dt[:k], dt[k:]) + Q @ beta)
        r_now = np.exp(log_r) if negbin else np.inf
        info = (Q * (mu / (1 + mu / r_now))[:, None]).T @ Q
        beta_cov = np.linalg.inv(info) * 2.38**2 / Q.shape[1]
        beta_walk = _RandomWalk(beta_cov, config.target_accept, 1.0)
        if negbin:
            disp_walk = _RandomWalk(np.eye(1) * 0.1**2, config.target_accept, 1.0)
        lgy1 = gammaln(design.y + 1)
    dt_walk = _RandomWalk(dt_cov, config.target_accept, 1.0)

    def loglik(dt_vec, beta_vec, sigma2_, log_r_):
        lp = _fixed_part(design, dt_vec[:k], dt_vec[k:]) + Q @ beta_vec
        if linear:
            r = design.y - lp
            return -0.5 * float(r @ r) / sigma2_
        mu = np.exp(lp)
        if not np.all(np.isfinite(mu)):
            return -np.inf
        return float(np.sum(nb_loglik_rows(design.y, mu, np.exp(log_r_) if negbin else None, lgy1)))

    def log_prior_normal(v):
        return -0.5 * float(v @ v) / pv

    def log_prior_dispersion(lr):
        # InvGamma on dispersion = exp(-lr), plus the log-Jacobian of the transform
        log_phi = -lr
        return -(config.ig_shape + 1) * log_phi - config.ig_rate * np.exp(-log_phi) + log_phi

    cur_ll = loglik(dt, beta, sigma2, log_r)
    keep = []
    post = config.n_iter - config.burn_in
    for it in range(config.n_iter):
        adapting = it < config.burn_in

        # (delta, effects) block with intercept compensation
        prop = dt_walk.propose(dt, rng)
        accepted = False
        if np.all((prop[:k] >= 0) & (prop[:k] <= 1)):
            beta_prop = beta.copy()
            beta_prop[0] -= float((prop[:k] - dt[:k]) @ lag_means)
            new_ll = loglik(prop, beta_prop, sigma2, log_r)
            log_ratio = (
                new_ll - cur_ll
                + log_prior_normal(prop[k:]) - log_prior_normal(dt[k:])
                + (-0.5 * beta_prop[0] ** 2 + 0.5 * beta[0] ** 2) / pv
            )
            if np.log(rng.random()) < log_ratio:
                dt, beta, cur_ll, accepted = prop, beta_prop, new_ll, True
        dt_walk.record(accepted, adapting)

        if linear:
            z = design.y - _fixed_part(design, dt[:k], dt[k:])
            prec = Q.T @ Q / sigma2 + np.eye(Q.shape[1]) / pv
            L = np.linalg.cholesky(prec)
            mean = np.linalg.solve(prec, Q.T @ z / sigma2)
            beta = mean + np.linalg.solve(L.T, rng.standard_normal(Q.shape[1]))
            resid = z - Q @ beta
            ssr = float(resid @ resid)
            sigma2 = (config.ig_rate + 0.5 * ssr) / rng.gamma(config.ig_shape + 0.5 * N)
            cur_ll = -0.5 * ssr / sigma2
        else:
            prop_b = beta_walk.propose(beta, rng)
            new_ll = loglik(dt, prop_b, sigma2, log_r)
            ok = np.log(rng.random()) < new_ll - cur_ll + log_prior_normal(prop_b) - log_prior_normal(beta)
            if ok:
                beta, cur_ll = prop_b, new_ll
            beta_walk.record(ok, adapting)
            if negbin:
                prop_lr = float(disp_walk.propose(np.array([log_r]), rng)[0])
                new_ll = loglik(dt, beta, sigma2, prop_lr)
                ok = np.log(rng.random()) < (
                    new_ll - cur_ll + log_prior_dispersion(prop_lr) - log_prior_dispersion(log_r)
                )
                if ok:
                    log_r, cur_ll = prop_lr, new_ll
                disp_walk.record(ok, adapting)

        if adapting and (it + 1) % config.adapt_every == 0:
            dt_walk.adapt(dt)
            if not linear:
                beta_walk.adapt(beta)
                if negbin:
                    disp_walk.adapt(np.array([log_r]))
            if it + 1 == config.burn_in // 2:
                dt_walk.learn_covariance()
                if not linear:
                    beta_walk.learn_covariance()

        if not adapting and (it - config.burn_in) % config.thin == 0:
            row = [beta[:1], dt[:k], dt[k:], beta[1:]]
            if linear:
                row.append([sigma2])
            elif negbin:
                row.append([np.exp(-log_r)])
            keep.append(np.concatenate([np.asarray(v, dtype=float) for v in row]))

    draws = np.array(keep)
    walks = {"delta_effects": dt_walk}
    if not linear:
        walks["intercept_covariates"] = beta_walk
        if negbin:
            walks["dispersion"] = disp_walk
    block_rates = {b: w.acceptance for b, w in walks.items()}
    acceptance = {}
    for j, nme in enumerate(names):
        if nme.startswith("delta_") or j in range(1 + k, 1 + k + m):
            acceptance[nme] = block_rates["delta_effects"]
        elif linear:
            acceptance[nme] = 1.0
        elif nme == "dispersion":
            acceptance[nme] = block_rates["dispersion"]
        else:
            acceptance[nme] = block_rates["intercept_covariates"]
    diagnostics = {
        "acceptance": acceptance,
        "block_acceptance": block_rates,
        "ess": {nme: effective_sample_size(draws[:, j]) for j, nme in enumerate(names)},
        "n_post_burn_in": post,
    }
    dead = [b for b, rate in block_rates.items() if rate == 0]
    if dead:
        raise MixingError(f"no proposals accepted after adaptation in blocks {dead}", diagnostics=diagnostics)
    return PosteriorFit(
        param_names=tuple(names),
        draws=draws,
        spec=spec,
        sampler_config=config.to_dict(),
        diagnostics=diagnostics,
        n_obs=N,
    )
