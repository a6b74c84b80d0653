"""Synthetic staggered-adoption experiments with recorded potential outcomes.

A replication takes a baseline panel of untreated outcomes ``Y(0)``, assigns
absorbing adoption times with selection on the reference-period rate, adds
(possibly heterogeneous) effects on the rate scale, and scores each estimator
of the SATT over the first ``horizon`` post-adoption periods against the
exact sample truth.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .comparators import did_gt, synth, twfe
from .errors import DamError, DomainError, SchemaError
from .estimands import EstimandRequest, adopter_cells, multiplicative_ratio, satt
from .estimation.bayes import SamplerConfig, fit_bayes
from .estimation.mle import fit_mle
from .model import DamParams, ModelSpec
from .panel import PanelDataset

HETEROGENEITY = ("additive", "multiplicative")


# -- baseline ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineConfig:
    """Synthetic AR(1) rate panel; unit means and populations are fixed per seed."""

    n_units: int = 51
    n_periods: int = 16
    rate_mean: float = 0.8
    unit_sd: float = 0.02
    ar: float = 0.8
    noise_sd: float = 0.04
    log_pop_range: tuple = (13.0, 16.0)
    n_covariates: int = 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_pop_range"] = list(self.log_pop_range)
        return d


def baseline_structure(config: BaselineConfig, rng: np.random.Generator) -> dict:
    """Unit means, populations and time-invariant covariates."""
    n = config.n_units
    return {
        "mu": config.rate_mean + config.unit_sd * rng.standard_normal(n),
        "population": np.round(np.exp(rng.uniform(*config.log_pop_range, size=n))),
        "covariates": rng.standard_normal((n, config.n_covariates)),
    }


def synthetic_baseline(
    config: BaselineConfig | None = None,
    rng: np.random.Generator | None = None,
    structure: dict | None = None,
) -> PanelDataset:
    """Untreated count panel with ``r_t = mu_i + ar (r_{t-1} - mu_i) + noise``.

    The first period is drawn from the stationary distribution. Counts are
    ``round(rate * population)``.
    """
    config = config or BaselineConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    structure = structure or baseline_structure(config, rng)
    n, P = config.n_units, config.n_periods
    mu = structure["mu"]
    r = np.empty((n, P))
    r[:, 0] = mu + config.noise_sd / math.sqrt(1 - config.ar**2) * rng.standard_normal(n)
    for t in range(1, P):
        r[:, t] = mu + config.ar * (r[:, t - 1] - mu) + config.noise_sd * rng.standard_normal(n)
    pop = np.repeat(structure["population"][:, None], P, axis=1)
    counts = np.round(np.clip(r, 0, None) * pop)
    cov = {f"x{j + 1}": np.repeat(structure["covariates"][:, j: j + 1], P, axis=1)
           for j in range(structure["covariates"].shape[1])}
    return PanelDataset(
        units=tuple(f"u{i:02d}" for i in range(n)),
        outcome=counts,
        population=pop,
        covariates=cov,
    )


# -- scenario, assignment, effects --------------------------------------------------------------

@dataclass(frozen=True)
class SimScenario:
    name: str = "baseline"
    n_treated: int = 20
    start_window: tuple = (8, 14)
    confounding_c: float = 0.0
    tau: float = -0.02
    heterogeneity: str = "additive"
    k_scale: float | None = None
    exceedance_target: float | None = None
    het_covariates: tuple | None = None
    reference_time: int = 7
    horizon: int = 3
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start_window", tuple(int(v) for v in self.start_window))
        if self.heterogeneity not in HETEROGENEITY:
            raise SchemaError(f"heterogeneity must be one of {HETEROGENEITY}")
        if self.confounding_c < 0:
            raise SchemaError("confounding_c must be nonnegative")
        if self.k_scale is not None and self.exceedance_target is not None:
            raise SchemaError("give k_scale or exceedance_target, not both")
        if self.exceedance_target is not None and not 0 < self.exceedance_target < 1:
            raise SchemaError("exceedance_target must lie in (0, 1)")
        lo, hi = self.start_window
        if not 1 <= lo <= hi:
            raise SchemaError(f"start_window {self.start_window} must satisfy 1 <= lo <= hi")
        if isinstance(self.baseline, dict):
            object.__setattr__(self, "baseline", BaselineConfig(**self.baseline))

    @property
    def het_scale(self) -> float:
        """``k`` such that ``tau_i = k * z_i`` with ``z_i`` standard normal."""
        if self.k_scale is not None:
            return float(self.k_scale)
        if self.exceedance_target is None:
            return 0.0
        return exceedance_k(self.tau, self.exceedance_target)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_window"] = list(self.start_window)
        d["baseline"] = self.baseline.to_dict()
        if self.het_covariates is not None:
            d["het_covariates"] = list(self.het_covariates)
        return d

    @classmethod
    def from_dict(cls, d) -> "SimScenario":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown scenario keys: {sorted(extra)}")
        if "baseline" in d and isinstance(d["baseline"], dict):
            b = dict(d["baseline"])
            if "log_pop_range" in b:
                b["log_pop_range"] = tuple(b["log_pop_range"])
            d["baseline"] = BaselineConfig(**b)
        if d.get("het_covariates") is not None:
            d["het_covariates"] = tuple(d["het_covariates"])
        return cls(**d)


def exceedance_k(tau: float, p: float) -> float:
    """Scale with ``P(|k Z| > |tau|) = p`` for standard normal ``Z``."""
    return abs(tau) / norm.ppf(1 - p / 2)


def max_min_scale(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    if span == 0:
        return np.ones_like(x)
    return (x - x.min()) / span


def assign_treatment(
    base_panel: PanelDataset,
    n_treated: int,
    start_window: tuple,
    confounding_c: float,
    rng: np.random.Generator | int,
    reference_time: int = 7,
) -> tuple[np.ndarray, np.ndarray]:
    """Absorbing adoption with selection probability proportional to the scaled rate^c.

    Returns the ``(n, T + 1)`` exposure matrix and adoption times (``-1`` for
    never treated). Sorted start times go to units in the order they are drawn,
    so under strong confounding the earliest times reach the highest rates.
    """
    rng = np.random.default_rng(rng)
    n, P = base_panel.outcome.shape
    if n_treated > n:
        raise DomainError(f"n_treated={n_treated} exceeds the {n} units")
    if not 0 <= reference_time < P:
        raise DomainError(f"reference_time {reference_time} outside the panel")
    lo, hi = start_window
    if hi >= P:
        raise DomainError(f"start_window {start_window} extends past the final period {P - 1}")
    scaled = max_min_scale(base_panel.rate[:, reference_time])
    if confounding_c == 0 or np.all(scaled == scaled[0]):
        weight = np.ones(n)
    else:
        weight = scaled ** confounding_c
    starts = np.sort(rng.integers(lo, hi + 1, size=n_treated))
    available = np.ones(n, dtype=bool)
    adoption = np.full(n, -1)
    for t in starts:
        w = np.where(available, weight, 0.0)
        if w.sum() <= 0:
            w = available.astype(float)
        i = rng.choice(n, p=w / w.sum())
        adoption[i] = t
        available[i] = False
    A = (np.arange(P)[None, :] >= np.where(adoption < 0, P + 1, adoption)[:, None]).astype(float)
    return A, adoption


@dataclass
class SimDraw:
    observed_panel: PanelDataset
    y1: np.ndarray
    y0: np.ndarray
    tau_i: np.ndarray
    A: np.ndarray
    adoption: np.ndarray
    clamped: np.ndarray
    horizon: int = 3

    @property
    def population(self) -> np.ndarray:
        return self.observed_panel.population

    def satt_truth(self, horizon: int | None = None) -> float:
        """Mean rate-scale ``Y(1) - Y(0)`` over the treated cells."""
        h = self.horizon if horizon is None else horizon
        units, times, _ = adopter_cells(self.adoption, h, self.A.shape[1] - 1)
        pop = self.population[units, times]
        return float(np.mean((self.y1[units, times] - self.y0[units, times]) / pop))

    def ratio_truth(self, horizon: int | None = None) -> float:
        """``sum Y(1) / sum Y(0)`` over the treated cells."""
        h = self.horizon if horizon is None else horizon
        units, times, _ = adopter_cells(self.adoption, h, self.A.shape[1] - 1)
        return float(self.y1[units, times].sum() / self.y0[units, times].sum())


def heterogeneity_draws(base_panel: PanelDataset, scenario: SimScenario, rng) -> np.ndarray:
    """``tau_i = k * standardized(X_i gamma)`` with ``gamma`` i.i.d. standard normal."""
    k = scenario.het_scale
    n = base_panel.n_units
    names = scenario.het_covariates or tuple(sorted(base_panel.covariates))
    if k == 0:
        return np.zeros(n)
    if not names:
        raise SchemaError("heterogeneity needs covariates on the base panel")
    X = np.column_stack([base_panel.covariate(c)[:, 0] for c in names])
    score = X @ rng.standard_normal(X.shape[1])
    sd = score.std()
    z = (score - score.mean()) / sd if sd > 0 else np.zeros(n)
    return k * z


def apply_effects(base_panel: PanelDataset, A: np.ndarray, adoption: np.ndarray, scenario: SimScenario, rng) -> SimDraw:
    """Treated potential outcomes and the realized panel."""
    tau_i = heterogeneity_draws(base_panel, scenario, rng)
    pop = base_panel.population
    y0 = np.array(base_panel.outcome)
    r0 = y0 / pop
    eff = (scenario.tau + tau_i)[:, None] * np.ones_like(r0)
    if scenario.heterogeneity == "additive":
        r1 = r0 + eff
    else:
        r1 = r0 * np.exp(eff)
    clamped = r1 < 0
    r1 = np.where(clamped, 0.0, r1)
    y1 = np.round(r1 * pop)
    observed = np.where(A == 1, y1, y0)
    panel = base_panel.evolve(outcome=observed, policies={"treat": A})
    return SimDraw(panel, y1, y0, tau_i, A, adoption, clamped & (A == 1), scenario.horizon)


def draw_replication(scenario: SimScenario, rng, structure=None, base_panel=None) -> SimDraw:
    """One replication: baseline noise (unless a panel is given), assignment, effects."""
    if base_panel is None:
        base_panel = synthetic_baseline(scenario.baseline, rng, structure)
    A, adoption = assign_treatment(
        base_panel, scenario.n_treated, scenario.start_window, scenario.confounding_c, rng, scenario.reference_time
    )
    return apply_effects(base_panel, A, adoption, scenario, rng)


# -- data straight from a DAM ---------------------------------------------------------------------

def generate_dam_panel(
    spec: ModelSpec,
    params: DamParams,
    n_units: int,
    n_periods: int,
    rng,
    assignment: str = "staggered",
    propensity: tuple = (0.0, 1.0),
    start_window: tuple | None = None,
    treated_share: float = 0.5,
    population=None,
    covariates: dict | None = None,
    burn_in: int = 30,
) -> tuple[PanelDataset, dict]:
    """Simulate a panel exactly from the model in ``spec``.

    ``assignment="staggered"`` gives each policy an absorbing adoption time for
    a random ``treated_share`` of units; ``"bernoulli"`` draws each exposure
    afresh with probability ``expit(b0 + b1 * (y*_{t-1} - mean))`` where ``y*``
    is the debiased lag, so ignorability given the prior control counterfactual
    holds by construction. Returns the panel and a truth dict holding the
    debiased lags (the control-counterfactual proxies) and the linear predictor.
    """
    rng = np.random.default_rng(rng)
    params.check(spec)
    n, P, k, l = n_units, n_periods, spec.k, spec.l
    total = burn_in + P
    pol_names = spec.policies
    A = {p: np.zeros((n, total)) for p in pol_names}
    if assignment == "staggered":
        lo, hi = start_window or (k + l + 1, P - 1)
        for p in pol_names:
            adopt = np.where(rng.random(n) < treated_share, rng.integers(lo, hi + 1, size=n), -1)
            for i in np.flatnonzero(adopt >= 0):
                A[p][i, burn_in + adopt[i]:] = 1.0
    elif assignment != "bernoulli":
        raise SchemaError("assignment must be 'staggered' or 'bernoulli'")
    pop = np.ones((n, total)) if population is None else np.broadcast_to(np.asarray(population, float), (n, total))
    X = np.zeros((n, total, len(spec.covariates)))
    for j, c in enumerate(spec.covariates):
        X[:, :, j] = np.broadcast_to(np.asarray(covariates[c], dtype=float), (n, total)) if covariates else 0.0
    pairs = [(pol_names.index(a), pol_names.index(b)) for a, b in spec.pairs]

    def eta(t):
        out = np.zeros(n)
        for pi, p in enumerate(pol_names):
            for z in range(l + 1):
                if t - z >= 0:
                    out += params.theta[pi, z] * A[p][:, t - z]
        for zeta, (a, b) in zip(params.zeta, pairs):
            out += zeta * A[pol_names[a]][:, t] * A[pol_names[b]][:, t]
        return out

    linear = spec.family == "linear"
    long_run = params.alpha / max(1e-8, 1 - params.delta.sum())
    Y = np.zeros((n, total))
    g = np.zeros((n, total))  # transformed outcome
    debiased = np.zeros((n, total))
    if linear:
        Y[:, :1] = long_run
        g[:, :1] = long_run
    else:
        Y[:, :1] = np.round(np.exp(long_run) * pop[:, :1])
        g[:, :1] = np.log((Y[:, :1] + spec.log_shift) / pop[:, :1])
    debiased[:, 0] = g[:, 0]
    center = long_run
    for t in range(1, total):
        if assignment == "bernoulli" and t >= burn_in:
            for p in pol_names:
                A[p][:, t] = (rng.random(n) < expit(propensity[0] + propensity[1] * (debiased[:, t - 1] - center))).astype(float)
        lp = np.full(n, params.alpha) + eta(t) + X[:, t, :] @ params.gamma
        for b in range(1, k + 1):
            s = max(t - b, 0)
            lp += params.delta[b - 1] * (g[:, s] - eta(s))
        if linear:
            Y[:, t] = lp + math.sqrt(params.sigma2) * rng.standard_normal(n)
            g[:, t] = Y[:, t]
        else:
            mu = np.exp(lp + np.log(pop[:, t]))
            if spec.count_model == "poisson" or params.dispersion in (None, 0):
                Y[:, t] = rng.poisson(mu)
            else:
                r = 1.0 / params.dispersion
                Y[:, t] = rng.negative_binomial(r, r / (r + mu))
            g[:, t] = np.log((Y[:, t] + spec.log_shift) / pop[:, t])
        debiased[:, t] = g[:, t] - eta(t)
    sl = slice(burn_in, total)
    panel = PanelDataset(
        units=tuple(f"u{i:03d}" for i in range(n)),
        outcome=Y[:, sl],
        policies={p: A[p][:, sl] for p in pol_names},
        population=None if population is None else pop[:, sl],
        covariates={c: X[:, sl, j] for j, c in enumerate(spec.covariates)},
    )
    return panel, {"debiased": debiased[:, sl], "center": center}


# -- estimators on a replication ------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    k: int = 1
    l: int = 0
    imputation: str = "observed_plus_model"
    n_draws: int = 1000
    n_boot: int = 999
    level: float = 0.95
    bayes_iter: int = 4000
    bayes_burn_in: int = 2000


def _dam(draw: SimDraw, cfg: EstimatorConfig, family: str, bayes: bool, rng_seed: int):
    spec = ModelSpec(k=cfg.k, l=cfg.l, family=family)
    if bayes:
        fit = fit_bayes(draw.observed_panel, spec, SamplerConfig(
            n_iter=cfg.bayes_iter, burn_in=cfg.bayes_burn_in, thin=2, seed=rng_seed))
    else:
        fit = fit_mle(draw.observed_panel, spec)
    req = EstimandRequest(kind="satt_avg", horizon=draw.horizon, imputation=cfg.imputation,
                          interval_level=cfg.level, n_draws=cfg.n_draws, seed=rng_seed)
    res = satt(fit, draw.observed_panel, req)
    extra = {}
    if family == "log_link":
        ratio = multiplicative_ratio(fit, draw.observed_panel, EstimandRequest(
            kind="multiplicative_ratio", horizon=draw.horizon, n_draws=cfg.n_draws, seed=rng_seed))
        extra = {"ratio": ratio.point, "theta_0": float(fit.params.theta[0, 0])}
    return res.point, res.interval, extra


def _comparator(fn):
    def run(draw: SimDraw, cfg: EstimatorConfig, rng_seed: int):
        kwargs = {"n_boot": cfg.n_boot, "seed": rng_seed, "level": cfg.level}
        if fn is not twfe:
            kwargs["horizon"] = draw.horizon
        r = fn(draw.observed_panel, "treat", **kwargs)
        return r.point, r.interval, {}
    return run


ESTIMATORS = {
    "dam": lambda d, c, s: _dam(d, c, "linear", False, s),
    "dam_bayes": lambda d, c, s: _dam(d, c, "linear", True, s),
    "dam_nb": lambda d, c, s: _dam(d, c, "log_link", False, s),
    "twfe": _comparator(twfe),
    "did_gt": _comparator(did_gt),
    "synth": _comparator(synth),
}


def run_replication(scenario: SimScenario, estimators, cfg: EstimatorConfig, seed_seq, structure, base_panel=None) -> dict:
    """Draw one replication and score every estimator; failures are recorded, not raised."""
    rng = np.random.default_rng(seed_seq)
    draw = draw_replication(scenario, rng, structure, base_panel)
    est_seed = int(rng.integers(0, 2**31 - 1))
    truth = draw.satt_truth()
    out = {"truth": truth, "ratio_truth": draw.ratio_truth(), "clamped": int(draw.clamped.sum()), "results": {}}
    for name in estimators:
        try:
            point, (lo, hi), extra = ESTIMATORS[name](draw, cfg, est_seed)
            out["results"][name] = {"point": float(point), "lo": float(lo), "hi": float(hi), **extra}
        except (DamError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out["results"][name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


# -- metrics --------------------------------------------------------------------------------------

def _finite_or_none(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class MetricsReport:
    scenario: dict
    n_replications: int
    metrics: dict  # estimator -> metric -> value
    flagged: list = field(default_factory=list)
    replications: list = field(default_factory=list, repr=False)

    def to_json_dict(self, include_replications: bool = False) -> dict:
        """JSON-safe view; undefined metrics (NaN) become ``None``."""
        d = {"scenario": self.scenario, "n_replications": self.n_replications,
             "metrics": _finite_or_none(self.metrics), "flagged": self.flagged}
        if include_replications:
            d["replications"] = _finite_or_none(self.replications)
        return d

    def tidy_rows(self) -> list[tuple]:
        name = self.scenario.get("name", "")
        return [(name, est, metric, value)
                for est, ms in self.metrics.items() for metric, value in ms.items()]


def score(replications: list[dict], estimators, scenario: dict, fail_threshold: float = 0.05) -> MetricsReport:
    """Aggregate replications into MSE, standardized MSE, coverage, power and width."""
    metrics, flagged = {}, []
    n = len(replications)
    for est in estimators:
        rows = [(r["truth"], r["results"][est]) for r in replications]
        ok = [(t, res) for t, res in rows if "error" not in res]
        n_fail = n - len(ok)
        if n_fail > fail_threshold * n:
            flagged.append(est)
        if not ok:
            metrics[est] = {"mse": float("nan"), "n_ok": 0, "n_failed": n_fail}
            continue
        truth = np.array([t for t, _ in ok])
        point = np.array([res["point"] for _, res in ok])
        lo = np.array([res["lo"] for _, res in ok])
        hi = np.array([res["hi"] for _, res in ok])
        err = point - truth
        covered = (lo <= truth) & (truth <= hi)
        excludes_zero = (lo > 0) | (hi < 0)
        sign_ok = np.sign(point) == np.sign(truth)
        m = {
            "mse": float(np.mean(err**2)),
            "bias": float(np.mean(err)),
            "mc_se_bias": float(np.std(err, ddof=1) / math.sqrt(len(err))) if len(err) > 1 else float("nan"),
            "coverage": float(np.mean(covered)),
            "power": float(np.mean(excludes_zero & sign_ok)),
            "mean_width": float(np.mean(hi - lo)),
            "n_ok": len(ok),
            "n_failed": n_fail,
        }
        if "ratio" in ok[0][1]:
            ratio_truth = np.array([r["ratio_truth"] for r in replications if "error" not in r["results"][est]])
            ratio = np.array([res["ratio"] for _, res in ok])
            m["ratio_mean"] = float(ratio.mean())
            m["ratio_truth_mean"] = float(ratio_truth.mean())
            m["ratio_mc_se"] = float(ratio.std(ddof=1) / math.sqrt(len(ratio))) if len(ratio) > 1 else float("nan")
        metrics[est] = m
    finite = [m["mse"] for m in metrics.values() if math.isfinite(m["mse"])]
    best = min(finite) if finite else float("nan")
    for m in metrics.values():
        m["std_mse"] = m["mse"] / best if math.isfinite(m["mse"]) and best > 0 else float("nan")
    return MetricsReport(scenario, n, metrics, flagged, replications)


def _rep_task(args):
    scenario, estimators, cfg, seq, structure, base_panel = args
    return run_replication(scenario, estimators, cfg, seq, structure, base_panel)


def run_scenario(
    scenario: SimScenario,
    estimators,
    n_reps: int,
    seed: int = 0,
    cfg: EstimatorConfig | None = None,
    workers: int = 1,
    scenario_index: int = 0,
    base_panel: PanelDataset | None = None,
) -> MetricsReport:
    """Replications of one scenario; the baseline structure is fixed by ``seed``.

    With ``base_panel`` its outcomes serve as ``Y(0)`` in every replication and
    only assignment and effect heterogeneity are redrawn.
    """
    if not estimators:
        raise SchemaError("estimators must be nonempty")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise SchemaError(f"unknown estimators {sorted(unknown)}; have {sorted(ESTIMATORS)}")
    cfg = cfg or EstimatorConfig()
    root = np.random.SeedSequence(seed)
    structure = baseline_structure(scenario.baseline, np.random.default_rng(root.spawn(1)[0]))
    seqs = [np.random.SeedSequence(seed, spawn_key=(1, scenario_index, r)) for r in range(n_reps)]
    tasks = [(scenario, tuple(estimators), cfg, s, structure, base_panel) for s in seqs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_rep_task, tasks))
    else:
        reps = [_rep_task(t) for t in tasks]
    return score(reps, estimators, scenario.to_dict())


def run_grid(scenarios, estimators, n_reps: int, seed: int = 0, cfg=None, workers: int = 1, base_panel=None) -> list[MetricsReport]:
    """One :class:`MetricsReport` per scenario, in input order."""
    return [run_scenario(sc, estimators, n_reps, seed, cfg, workers, idx, base_panel) for idx, sc in enumerate(scenarios)]


CONFOUNDING_LEVELS = {"none": 0.0, "moderate": 1.0, "high": 3.0}
HETEROGENEITY_LEVELS = {"none": None, "moderate": 0.1, "high": 0.33}


def standard_grid(heterogeneity: str = "additive", tau: float = -0.02, baseline: BaselineConfig | None = None) -> list[SimScenario]:
    """The 3 x 3 confounding by heterogeneity grid."""
    baseline = baseline or BaselineConfig()
    out = []
    for cname, c in CONFOUNDING_LEVELS.items():
        for hname, p in HETEROGENEITY_LEVELS.items():
            out.append(SimScenario(
                name=f"confounding={cname},heterogeneity={hname}",
                confounding_c=c, exceedance_target=p, tau=tau,
                heterogeneity=heterogeneity, baseline=baseline,
            ))
    return out


def write_reports(reports: list[MetricsReport], json_path, csv_path, include_replications=False):
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json_dict(include_replications) for r in reports], fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "estimator", "metric", "value"])
        for r in reports:
            for row in r.tidy_rows():
                w.writerow(list(row[:3]) + [repr(row[3]) if isinstance(row[3], float) else row[3]])


def with_overrides(scenario: SimScenario, **changes) -> SimScenario:
    return replace(scenario, **changes)
