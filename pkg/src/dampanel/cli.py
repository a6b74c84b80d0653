"""Command-line entry point: ``dampanel <command> CONFIG [options]``.

Commands read one YAML or JSON config file. Every run writes its artifacts
plus a ``manifest_<command>.json`` (config hash, seed, library versions, artifact
hashes) under ``output_dir`` and nowhere else. Exit codes: 0 success, 2 bad
config or data, 3 numerical failure; errors are reported on stderr as JSON.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml

from . import bias as bias_mod
from .comparators import did_gt, synth, twfe
from .errors import DamError, DataError, NumericalError, SchemaError, SpecMismatchError
from .estimands import EstimandRequest, evaluate, write_sapo_csv
from .estimation import PosteriorFit, SamplerConfig, fit_bayes, fit_from_json_dict, fit_mle
from .model import ModelSpec
from .panel import PanelDataset, dichotomize, load_csv
from .sim import BaselineConfig, EstimatorConfig, MetricsReport, SimScenario, standard_grid, run_grid, write_reports

COMPARATORS = {"twfe": twfe, "did_gt": did_gt, "synth": synth}
EXIT_DATA, EXIT_NUMERIC = 2, 3


# -- config -----------------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def _parse_override(text: str):
    if "=" not in text:
        raise SchemaError(f"--set expects key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    """Read a config file and apply ``key.path=value`` scalar overrides."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such config file: {path}")
    try:
        config = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SchemaError(f"cannot parse {path.name}: {exc}") from exc
    if not isinstance(config, dict):
        raise SchemaError("config must be a mapping at the top level")
    config = copy.deepcopy(config)
    for text in overrides:
        keys, value = _parse_override(text)
        if isinstance(value, (dict, list)):
            raise SchemaError(f"--set only overrides scalar fields, got {value!r} for {'.'.join(keys)}")
        node = config
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise SchemaError(f"cannot set {'.'.join(keys)}: {k!r} is not a mapping")
        node[keys[-1]] = value
    config.setdefault("seed", 0)
    config.setdefault("output_dir", "output")
    config["_base_dir"] = str(path.resolve().parent)
    return config


def _resolve(config: dict, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(config["_base_dir"]) / p


def _require_mode(config: dict, mode: str):
    has_data, has_sim = "data" in config, "simulation" in config
    if has_data and has_sim:
        raise SchemaError("config holds both 'data' and 'simulation'; one mode per invocation")
    if mode == "analysis" and not has_data:
        raise SchemaError("this command needs a 'data' block")
    if mode == "simulation" and not has_sim:
        raise SchemaError("this command needs a 'simulation' block")


def load_data(config: dict) -> PanelDataset:
    block = config["data"]
    if "csv" not in block or "schema" not in block:
        raise SchemaError("data block needs 'csv' and 'schema'")
    data = load_csv(_resolve(config, block["csv"]), block["schema"])
    for policy in block.get("dichotomize", []):
        data = dichotomize(data, policy)
    return data


def model_spec(config: dict) -> ModelSpec:
    if "model" not in config:
        raise SchemaError("config needs a 'model' block")
    return ModelSpec.from_dict(config["model"])


# -- output -----------------------------------------------------------------------------------

class RunOutput:
    """Writes artifacts under ``output_dir`` and records them in the manifest."""

    def __init__(self, config: dict, command: str):
        self.config = config
        self.command = command
        self.dir = _resolve(config, config["output_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        # the output location is not part of the analysis, so reruns elsewhere match byte for byte
        public = {k: v for k, v in config.items() if not k.startswith("_") and k != "output_dir"}
        self.hash = config_hash(public)
        self.public = public
        self.artifacts = []

    def path(self, name: str) -> Path:
        p = (self.dir / name).resolve()
        if self.dir.resolve() not in p.parents:
            raise SchemaError(f"artifact {name!r} would land outside output_dir")
        self.artifacts.append(name)
        return p

    def json(self, name: str, obj: dict):
        obj = dict(obj)
        obj["run"] = {"config_sha256": self.hash, "seed": self.config["seed"], "command": self.command}
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def manifest(self):
        digests = {}
        for name in self.artifacts:
            digests[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "config": self.public,
            "config_sha256": self.hash,
            "seed": self.config["seed"],
            "versions": versions(),
            "artifacts": digests,
        }
        with open(self.dir / f"manifest_{self.command}.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "dampanel": own,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


# -- commands ---------------------------------------------------------------------------------

def sampler_config(config: dict) -> SamplerConfig:
    block = dict(config.get("sampler", {}))
    block.setdefault("seed", config["seed"])
    return SamplerConfig.from_dict(block)


def run_fit(config: dict, data: PanelDataset, spec: ModelSpec):
    block = config.get("fit", {})
    method = block.get("method", "mle")
    if method == "mle":
        return fit_mle(data, spec, cluster=block.get("cluster", "unit"))
    if method == "bayes":
        return fit_bayes(data, spec, sampler_config(config))
    raise SchemaError(f"fit.method must be 'mle' or 'bayes', got {method!r}")


def cmd_fit(config: dict, args) -> int:
    _require_mode(config, "analysis")
    data, spec = load_data(config), model_spec(config)
    fit = run_fit(config, data, spec)
    out = RunOutput(config, "fit")
    if isinstance(fit, PosteriorFit):
        fit.write_draws_csv(out.path("draws.csv"))
        out.json("fit.json", fit.to_json_dict("draws.csv"))
    else:
        out.json("fit.json", fit.to_json_dict())
    out.manifest()
    return 0


def _estimand_requests(config: dict) -> list[EstimandRequest]:
    blocks = config.get("estimands")
    if not blocks:
        raise SchemaError("config needs a nonempty 'estimands' list")
    requests = []
    for b in blocks:
        b = dict(b)
        b.setdefault("seed", config["seed"])
        requests.append(EstimandRequest.from_dict(b))
    return requests


def cmd_estimate(config: dict, args) -> int:
    _require_mode(config, "analysis")
    data, spec = load_data(config), model_spec(config)
    out = RunOutput(config, "estimate")
    fit_path = Path(args.fit) if args.fit else out.dir / "fit.json"
    if not fit_path.exists():
        raise SchemaError(f"no fit artifact at {fit_path}; run 'fit' first or pass --fit")
    with open(fit_path, encoding="utf-8") as fh:
        fit_json = json.load(fh)
    if fit_json.get("spec_hash") != spec.spec_hash():
        raise SpecMismatchError(
            f"fit artifact was produced for model {fit_json.get('spec_hash')}, config describes {spec.spec_hash()}"
        )
    fit = fit_from_json_dict(fit_json, fit_path.parent)
    for j, request in enumerate(_estimand_requests(config)):
        stem = f"estimand_{j:02d}_{request.kind}"
        result = evaluate(fit, data, request)
        if request.kind == "sapo":
            write_sapo_csv(result, out.path(stem + ".csv"))
            out.json(stem + ".json", {"request": request.to_dict(), "levels": [r.to_json_dict() for r in result]})
            continue
        out.json(stem + ".json", {"request": request.to_dict(), **result.to_json_dict()})
        if result.per_period:
            result.write_per_period_csv(out.path(stem + ".csv"))
    out.manifest()
    return 0


def cmd_compare(config: dict, args) -> int:
    _require_mode(config, "analysis")
    data = load_data(config)
    blocks = config.get("comparators")
    if not blocks:
        raise SchemaError("config needs a nonempty 'comparators' list")
    out = RunOutput(config, "compare")
    for j, b in enumerate(blocks):
        b = dict(b)
        name = b.pop("name", None)
        if name not in COMPARATORS:
            raise SchemaError(f"comparator name must be one of {sorted(COMPARATORS)}, got {name!r}")
        b.setdefault("seed", config["seed"])
        if "policy" not in b:
            if len(data.policies) != 1:
                raise SchemaError(f"comparator {name!r} needs a 'policy' for a multi-policy panel")
            b["policy"] = next(iter(data.policies))
        result = COMPARATORS[name](data, **b)
        out.json(f"comparator_{j:02d}_{name}.json", result.to_json_dict())
    out.manifest()
    return 0


def simulation_scenarios(block: dict) -> list[SimScenario]:
    baseline = BaselineConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in block.get("baseline", {}).items()})
    if "scenarios" in block:
        out = []
        for s in block["scenarios"]:
            s = dict(s)
            s.setdefault("baseline", baseline.to_dict())
            out.append(SimScenario.from_dict(s))
        return out
    grid = block.get("grid", "standard")
    if grid != "standard":
        raise SchemaError(f"simulation.grid must be 'standard' or replaced by a 'scenarios' list, got {grid!r}")
    return standard_grid(block.get("heterogeneity", "additive"), block.get("tau", -0.02), baseline)


def cmd_simulate(config: dict, args) -> int:
    _require_mode(config, "simulation")
    block = config["simulation"]
    scenarios = simulation_scenarios(block)
    estimators = block.get("estimators", ["dam", "twfe", "did_gt", "synth"])
    cfg = EstimatorConfig(**block.get("estimator_config", {}))
    base_panel = None
    if "baseline_csv" in block:
        b = block["baseline_csv"]
        base_panel = load_csv(_resolve(config, b["csv"]), b["schema"])
    reports: list[MetricsReport] = run_grid(
        scenarios, estimators, int(block.get("n_reps", 200)), seed=int(config["seed"]), cfg=cfg,
        workers=max(1, args.threads or 1), base_panel=base_panel,
    )
    out = RunOutput(config, "simulate")
    write_reports(reports, out.path("metrics.json"), out.path("metrics.csv"),
                  include_replications=bool(block.get("keep_replications", False)))
    out.manifest()
    return 0


def bias_report(moments: bias_mod.MomentInputs, k_ratio: float | None = None) -> dict:
    """Every bias quantity the supplied moments allow, with reasons for the rest."""
    report = {"inputs": moments.to_dict()}
    try:
        report["classical"] = bias_mod.classical_bias(moments)
    except DataError as exc:
        report["classical"] = {"unavailable": str(exc)}
    try:
        report["general"] = bias_mod.general_bias(moments)
    except DamError as exc:
        report["general"] = {"unavailable": str(exc)}
    if k_ratio is None and moments.var_U is not None and moments.resid_var_Y0_given_A:
        k_ratio = moments.var_U / moments.resid_var_Y0_given_A
    if k_ratio is not None and k_ratio > 0 and None not in (moments.delta, moments.gamma_A):
        report["bound"] = {
            "k_ratio": k_ratio,
            "bound": bias_mod.bias_bound(moments.delta, moments.gamma_A, k_ratio),
        }
    elif k_ratio == 0:
        report["bound"] = {"k_ratio": 0.0, "bound": 0.0}
    if None not in (moments.var_U, moments.var_Y0) and moments.cov_U_Y0 is not None:
        star, note = bias_mod.projection_decompose(moments.var_U, moments.cov_U_Y0, moments.var_Y0)
        report["projection"] = {"var_U_star": star, "note": note}
    return report


def cmd_bias(args) -> int:
    moments = bias_mod.MomentInputs.from_json(args.moments)
    report = bias_report(moments, args.k_ratio)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output_dir:
        d = Path(args.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "bias.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_diagnose(config: dict, args) -> int:
    _require_mode(config, "analysis")
    data = load_data(config)
    policy = args.policy or config.get("diagnose", {}).get("policy")
    if policy is None:
        if len(data.policies) != 1:
            raise SchemaError("name the policy with --policy for a multi-policy panel")
        policy = next(iter(data.policies))
    threshold = float(config.get("diagnose", {}).get("threshold", 1.2))
    result = bias_mod.variance_diagnostic(data, policy, threshold)
    out = RunOutput(config, "diagnose")
    out.json("diagnostic.json", {"policy": policy, **result})
    out.manifest()
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


# -- entry point ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dampanel", description="Debiased autoregressive panel models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a scalar config field, e.g. sampler.n_iter=4000")
        p.add_argument("--threads", type=int, default=1, help="worker processes for the simulation grid")
        return p

    with_config("fit", "fit the configured model and write fit.json (and draws.csv)")
    est = with_config("estimate", "evaluate the configured estimands from a fit artifact")
    est.add_argument("--fit", help="fit.json to use (default: output_dir/fit.json)")
    with_config("compare", "run comparator estimators")
    with_config("simulate", "run the simulation grid and write metrics")
    diag = with_config("diagnose", "treated/control variance diagnostic")
    diag.add_argument("--policy", help="policy to diagnose")
    b = sub.add_parser("bias", help="bias formulas from a moments JSON file")
    b.add_argument("moments", help="JSON object of moment inputs")
    b.add_argument("--k-ratio", type=float, help="Var(U) / residual variance ratio for the bound")
    b.add_argument("--output-dir", help="also write bias.json here")
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DamError):
        payload["details"] = exc.details()
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        return _fail(SchemaError("--threads must be at least 1"), EXIT_DATA)
    try:
        if args.command == "bias":
            return cmd_bias(args)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = load_config(args.config, overrides)
        if args.output_dir is not None:
            config["output_dir"] = str(Path(args.output_dir).resolve())
        return COMMANDS[args.command](config, args)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except NumericalError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        return _fail(exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
