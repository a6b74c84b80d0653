"""Profiled M-estimation of a DAM.

Linear family: for fixed autoregressive and policy-effect coefficients the
model is linear in the intercept and covariate coefficients, which are solved
exactly in an inner step while a Nelder-Mead simplex searches over
``(delta, effects)``. Log-link family: all mean parameters move together by
Fisher scoring on the exact Jacobian of the bilinear predictor, started from
the profiled GLM fit at ``delta = 0.5``, no effects.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, polygamma

from ..errors import ConvergenceError, InsufficientHistoryError, RankError
from ..model import ModelDesign, ModelSpec, build_design, linear_predictor, param_names, param_slices
from ..panel import PanelDataset
from .results import FreqFit
from .sandwich import default_steps, numerical_jacobian, sandwich

LOG_R_BOUNDS = (-20.0, 30.0)


def _check_rank(Q: np.ndarray, names: list[str]):
    if Q.shape[1] == 0:
        return
    _, R, piv = scipy.linalg.qr(Q, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(Q.shape) * np.finfo(float).eps * 10
    rank = int(np.sum(d > tol))
    if rank < Q.shape[1]:
        bad = [names[j] for j in piv[rank:]]
        raise RankError(f"collinear design columns: {bad}", columns=bad)


def _fixed_part(design: ModelDesign, delta: np.ndarray, effects: np.ndarray) -> np.ndarray:
    base = design.lags @ delta + design.effects_now @ effects
    for b in range(design.spec.k):
        base -= delta[b] * (design.effects_lag[b] @ effects)
    return base + design.offset


# -- negative binomial pieces ---------------------------------------------------------

def nb_loglik_rows(y, mu, r, lgy1=None):
    if lgy1 is None:
        lgy1 = gammaln(y + 1)
    if r is None:
        return y * np.log(mu) - mu - lgy1
    return gammaln(y + r) - gammaln(r) - lgy1 + r * np.log(r / (r + mu)) + y * np.log(mu / (r + mu))


def nb_dr_rows(y, mu, r):
    """Per-row derivative of the NB log-likelihood with respect to the size ``r``."""
    return digamma(y + r) - digamma(r) + np.log(r / (r + mu)) + 1 - (y + r) / (r + mu)


def _glm_solve(y, Q, off, beta, log_r, negbin, lgy1, tol=1e-9, max_iter=100):
    """Maximize the count likelihood over ``beta`` (and ``log r`` for NB) by damped Newton."""

    def ll(b, lr):
        mu = np.exp(off + Q @ b)
        return float(np.sum(nb_loglik_rows(y, mu, np.exp(lr) if negbin else None, lgy1)))

    p = Q.shape[1]
    cur = ll(beta, log_r)
    for _ in range(max_iter):
        mu = np.exp(off + Q @ beta)
        if negbin:
            r = np.exp(log_r)
            w = r + mu
            g_beta = Q.T @ ((y - mu) * r / w)
            H_bb = -(Q * (mu * r * (y + r) / w**2)[:, None]).T @ Q
            d_r = np.sum(nb_dr_rows(y, mu, r))
            d2_r = np.sum(polygamma(1, y + r) - polygamma(1, r) + 1 / r - 2 / w + (y + r) / w**2)
            H_bl = Q.T @ ((y - mu) * mu / w**2) * r
            grad = np.append(g_beta, r * d_r)
            H = np.zeros((p + 1, p + 1))
            H[:p, :p] = H_bb
            H[:p, p] = H[p, :p] = H_bl
            H[p, p] = r * d_r + r * r * d2_r
        else:
            grad = Q.T @ (y - mu)
            H = -(Q * mu[:, None]).T @ Q
        try:
            step = -np.linalg.solve(H, grad)
            if grad @ step <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            # fall back to a Fisher-scoring direction, always ascent
            diag = np.abs(np.diag(H)) + 1e-8
            step = grad / diag
        if negbin:
            step[p] = float(np.clip(step[p], -2.0, 2.0))
        t = 1.0
        while True:
            b_new = beta + t * step[:p]
            lr_new = float(np.clip(log_r + t * step[p], *LOG_R_BOUNDS)) if negbin else log_r
            new = ll(b_new, lr_new)
            if new >= cur - 1e-12 * abs(cur) or t < 1e-8:
                break
            t *= 0.5
        moved = np.max(np.abs(t * step))
        beta, log_r, cur = b_new, lr_new, new
        if moved < tol:
            break
    return beta, log_r, cur


class _Profile:
    """Profiled objective over the outer vector ``(delta, effects)``."""

    def __init__(self, design: ModelDesign, fixed_effects=None):
        self.design = design
        spec = design.spec
        self.spec = spec
        self.N = design.n_rows
        self.fixed_effects = None if fixed_effects is None else np.asarray(fixed_effects, dtype=float)
        names = ["intercept"] + list(spec.covariates)
        self.Q = np.column_stack([np.ones(self.N), design.X])
        if self.fixed_effects is not None:
            # delta enters linearly once the effects are known
            deb = np.column_stack(
                [design.lags[:, b] - design.effects_lag[b] @ self.fixed_effects for b in range(spec.k)]
            )
            self.Q = np.column_stack([self.Q, deb])
            names += [f"debiased_lag_{b}" for b in range(1, spec.k + 1)]
        _check_rank(self.Q, names)
        self.negbin = spec.family == "log_link" and spec.count_model == "negbin"
        if spec.family == "linear":
            self._qr = np.linalg.qr(self.Q)
        else:
            self.lgy1 = gammaln(design.y + 1)
            beta0 = np.linalg.lstsq(self.Q, np.log(design.y + 0.5) - design.offset, rcond=None)[0]
            mu = np.exp(design.offset + self.Q @ beta0)
            phi = max(1e-8, float(np.mean(((design.y - mu) ** 2 - mu) / mu**2)))
            self._warm = (beta0, float(np.clip(-np.log(phi), *LOG_R_BOUNDS)))

    def split(self, v):
        k = self.spec.k
        if self.fixed_effects is not None:
            return None, self.fixed_effects
        return v[:k], v[k:]

    def inner(self, v):
        d = self.design
        delta, eff = self.split(v)
        if self.fixed_effects is not None:
            off = d.offset + d.effects_now @ eff
        else:
            off = _fixed_part(d, delta, eff)
        if self.spec.family == "linear":
            z = d.y - off
            q, r = self._qr
            beta = scipy.linalg.solve_triangular(r, q.T @ z)
            resid = z - self.Q @ beta
            return beta, None, float(resid @ resid)
        beta, log_r, ll = _glm_solve(d.y, self.Q, off, self._warm[0], self._warm[1], self.negbin, self.lgy1)
        self._warm = (beta, log_r)
        return beta, log_r, -ll

    def objective(self, v) -> float:
        if v is not None and not np.all(np.isfinite(v)):
            return np.inf
        return self.inner(v)[2] / self.N

    def full_vector(self, v) -> np.ndarray:
        spec = self.spec
        beta, log_r, obj = self.inner(v)
        q = len(spec.covariates)
        if self.fixed_effects is not None:
            delta = beta[1 + q:]
            eff = self.fixed_effects
        else:
            delta, eff = self.split(v)
        parts = [beta[:1], delta, eff, beta[1: 1 + q]]
        if spec.scale_name == "sigma2":
            parts.append([obj / self.N])
        elif spec.scale_name == "dispersion":
            parts.append([np.exp(-log_r)])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def lp_jacobian(design: ModelDesign, x: np.ndarray) -> np.ndarray:
    """``(N, p_mean)`` derivative of the linear predictor in ``(alpha, delta, effects, gamma)``."""
    spec = design.spec
    s = param_slices(spec)
    delta, eff = x[s["delta"]], x[s["effects"]]
    g_eff = design.effects_now.copy()
    for b in range(spec.k):
        g_eff -= delta[b] * design.effects_lag[b]
    return np.column_stack([
        np.ones(design.n_rows),
        np.column_stack([design.lags[:, b] - design.effects_lag[b] @ eff for b in range(spec.k)]),
        g_eff,
        design.X,
    ])


def row_scores(design: ModelDesign, x: np.ndarray) -> np.ndarray:
    """Per-row estimating functions (log-likelihood scores) at parameter vector ``x``."""
    spec = design.spec
    s = param_slices(spec)
    lp = linear_predictor(design, x)[0]
    G = lp_jacobian(design, x)
    y = design.y
    if spec.family == "linear":
        sigma2 = x[s["scale"]][0]
        r = y - lp
        return np.column_stack([G * (r / sigma2)[:, None], (r * r - sigma2) / (2 * sigma2**2)])
    mu = np.exp(lp)
    if spec.count_model == "poisson":
        return G * (y - mu)[:, None]
    phi = x[s["scale"]][0]
    rsize = 1.0 / phi
    dlp = (y - mu) / (1 + phi * mu)
    dphi = -nb_dr_rows(y, mu, rsize) * rsize**2
    return np.column_stack([G * dlp[:, None], dphi])


def _score_counts(design: ModelDesign, mean0: np.ndarray, log_r0: float, negbin: bool, lgy1,
                  tol: float = 1e-10, max_iter: int = 500):
    """Joint Fisher scoring over every mean parameter of a log-link DAM.

    The linear predictor is bilinear in ``(delta, effects)``, so each step
    uses its exact Jacobian; the NB size is refreshed by a damped Newton step
    on ``log r`` after every mean step. Returns ``(mean, log_r, loglik, iterations, converged)``.
    """
    y = design.y
    spec = design.spec

    def full(mean):
        return np.concatenate([mean, [1.0]]) if spec.scale_name else mean

    def loglik(mean, lr):
        mu = np.exp(linear_predictor(design, full(mean))[0])
        return float(np.sum(nb_loglik_rows(y, mu, np.exp(lr) if negbin else None, lgy1)))

    mean, log_r = np.array(mean0, dtype=float), float(log_r0)
    cur = loglik(mean, log_r)
    for it in range(1, max_iter + 1):
        x = full(mean)
        mu = np.exp(linear_predictor(design, x)[0])
        G = lp_jacobian(design, x)
        w = mu / (1 + mu * np.exp(-log_r)) if negbin else mu
        grad = G.T @ ((y - mu) * (w / mu))
        info = (G * w[:, None]).T @ G
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = grad / (np.abs(np.diag(info)) + 1e-12)
        t = 1.0
        while True:
            new = loglik(mean + t * step, log_r)
            if new >= cur - 1e-13 * abs(cur) or t < 1e-10:
                break
            t *= 0.5
        mean_moved = np.max(np.abs(t * step) / np.maximum(1.0, np.abs(mean)))
        mean, cur = mean + t * step, new
        lr_moved = 0.0
        if negbin:
            mu = np.exp(linear_predictor(design, full(mean))[0])
            for _ in range(20):
                r = np.exp(log_r)
                d1 = r * np.sum(nb_dr_rows(y, mu, r))
                d2 = d1 + r * r * np.sum(
                    polygamma(1, y + r) - polygamma(1, r) + 1 / r - 2 / (r + mu) + (y + r) / (r + mu) ** 2
                )
                lr_step = -d1 / d2 if d2 < 0 else np.sign(d1) * 0.5
                lr_step = float(np.clip(lr_step, -2.0, 2.0))
                lr_new = float(np.clip(log_r + lr_step, *LOG_R_BOUNDS))
                tl = 1.0
                while loglik(mean, lr_new) < cur - 1e-13 * abs(cur) and tl > 1e-8:
                    tl *= 0.5
                    lr_new = float(np.clip(log_r + tl * lr_step, *LOG_R_BOUNDS))
                lr_moved = max(lr_moved, abs(lr_new - log_r))
                log_r = lr_new
                cur = loglik(mean, log_r)
                if abs(tl * lr_step) < 1e-10:
                    break
        if mean_moved < tol and lr_moved < 1e-8:
            return mean, log_r, cur, it, True
    return mean, log_r, cur, max_iter, False


def fit_mle(
    data: PanelDataset,
    spec: ModelSpec,
    fixed_effects=None,
    cluster: str | None = "unit",
    xatol: float = 1e-8,
    max_restarts: int = 6,
    maxiter: int = 20_000,
) -> FreqFit:
    """Fit ``spec`` by profiled least squares / maximum likelihood.

    Parameters
    ----------
    fixed_effects
        Hold the effect vector (``theta`` then ``zeta``) at these values. The
        model is then linear in ``delta`` and solved without the simplex.
    cluster
        ``"unit"`` sums scores within unit before forming the sandwich meat;
        ``None`` treats rows as independent.
    """
    design = build_design(data, spec)
    names = param_names(spec)
    prof = _Profile(design, fixed_effects)
    if prof.N <= len(names):
        raise InsufficientHistoryError(f"{prof.N} fitable rows cannot identify {len(names)} parameters")
    m = spec.n_effects
    converged, iterations, grad_norm = True, 0, 0.0
    if fixed_effects is None and spec.family == "log_link":
        x0 = np.concatenate([np.full(spec.k, 0.5), np.zeros(m)])
        beta, log_r, _ = prof.inner(x0)
        q = len(spec.covariates)
        mean0 = np.concatenate([beta[:1], x0, beta[1: 1 + q]])
        mean, log_r, ll, iterations, converged = _score_counts(design, mean0, log_r, prof.negbin, prof.lgy1)
        if not converged:
            raise ConvergenceError("Fisher scoring did not converge", last_iterate=mean, iterations=iterations)
        theta_full = np.concatenate([mean, [np.exp(-log_r)]]) if prof.negbin else mean
        grad_norm = float(np.linalg.norm(row_scores(design, theta_full).sum(axis=0)[: len(mean)]) / prof.N)
        free = np.ones(len(names), dtype=bool)
        objective = -ll
    elif fixed_effects is None:
        x0 = np.concatenate([np.full(spec.k, 0.5), np.zeros(m)])
        eff_step = 0.1 * float(np.std(design.y)) if spec.family == "linear" else 0.1
        eff_step = eff_step if eff_step > 0 else 0.1
        steps = np.concatenate([np.full(spec.k, 0.1), np.full(m, eff_step)])
        x, fbest = x0, prof.objective(x0)
        for restart in range(max_restarts):
            simplex = np.vstack([x] + [x + np.eye(len(x))[j] * steps[j] for j in range(len(x))])
            res = minimize(
                prof.objective,
                x,
                method="Nelder-Mead",
                options={
                    "xatol": xatol,
                    "fatol": 1e-11 * max(1.0, abs(fbest)),
                    "maxiter": maxiter,
                    "maxfev": 2 * maxiter,
                    "initial_simplex": simplex,
                    "adaptive": len(x) > 3,
                },
            )
            iterations += int(res.nit)
            improved = fbest - res.fun
            x, fbest = res.x, min(fbest, res.fun)
            converged = bool(res.success)
            steps = np.maximum(np.abs(steps) * 0.1, 1e-4)
            if restart > 0 and improved <= 1e-13 * max(1.0, abs(fbest)):
                break
        if not converged:
            raise ConvergenceError("simplex search did not converge", last_iterate=x, iterations=iterations)
        g = numerical_jacobian(lambda v: np.array([prof.objective(v)]), x, steps=default_steps(x, 1e-6))
        grad_norm = float(np.linalg.norm(g))
        theta_full = prof.full_vector(x)
        free = np.ones(len(names), dtype=bool)
        objective = float(prof.inner(x)[2])
    else:
        theta_full = prof.full_vector(None)
        s = param_slices(spec)
        free = np.ones(len(names), dtype=bool)
        free[s["effects"]] = False
        objective = float(prof.inner(None)[2])
    clusters = design.frame.unit_idx if cluster == "unit" else None
    steps = default_steps(theta_full)
    if spec.scale_name:
        j = names.index(spec.scale_name)
        steps[j] = 1e-5 * abs(theta_full[j])
    vcov = sandwich(lambda v: row_scores(design, v), theta_full, clusters=clusters, free=free, steps=steps)
    return FreqFit(
        method="mle",
        param_names=tuple(names),
        coef=theta_full,
        vcov=vcov,
        convergence={"converged": converged, "iterations": iterations, "grad_norm": grad_norm},
        spec=spec,
        n_obs=prof.N,
        extra={"objective": objective, "cluster": cluster},
    )
