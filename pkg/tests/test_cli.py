import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dampanel.bias import MomentInputs
from dampanel.cli import main
from dampanel.model import DamParams, ModelSpec
from dampanel.panel import write_csv
from dampanel.sim import generate_dam_panel

SCHEMA = {"unit": "state", "time": "year", "outcome": "deaths", "population": "pop", "policy:treat": "law"}


def _panel_csv(path, theta0=-0.5, seed=3, two_policies=False):
    if two_policies:
        spec = ModelSpec(k=1, l=0, policies=("a", "m"), include_interactions=True)
        params = DamParams(alpha=0.2, delta=[0.5], theta=[[0.3], [-0.2]], zeta=[0.1], sigma2=0.04)
        schema = {"unit": "state", "time": "year", "outcome": "deaths", "policy:a": "a", "policy:m": "m"}
    else:
        spec = ModelSpec(k=2, l=2)
        params = DamParams(alpha=0.2, delta=[0.5, 0.2], theta=[[theta0, 0.0, 0.0]], sigma2=0.09)
        schema = SCHEMA
    panel, _ = generate_dam_panel(spec, params, 51, 17, rng=seed, start_window=(6, 13))
    if not two_policies:
        panel = panel.evolve(population=np.full(panel.outcome.shape, 1e5))
    write_csv(panel, path, schema)
    return schema


def _config(tmp_path, **blocks):
    cfg = {
        "seed": 11,
        "output_dir": "out",
        "data": {"csv": "panel.csv", "schema": SCHEMA},
        "model": {"k": 2, "l": 2, "policies": ["treat"]},
        "fit": {"method": "mle"},
        "sampler": {"n_iter": 1200, "burn_in": 600, "thin": 2},
        "estimands": [{"kind": "satt_avg", "n_draws": 300},
                      {"kind": "satt_by_period", "imputation": "observed_plus_model", "n_draws": 300}],
        "comparators": [{"name": "twfe", "n_boot": 49}, {"name": "did_gt", "n_boot": 49},
                        {"name": "synth", "n_boot": 49}],
    }
    cfg.update(blocks)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


@pytest.fixture
def workdir(tmp_path):
    _panel_csv(tmp_path / "panel.csv")
    return tmp_path


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_bayes_fit_writes_draws_with_named_columns(workdir):
    cfg = _config(workdir, fit={"method": "bayes"})
    assert main(["fit", str(cfg)]) == 0
    with open(workdir / "out" / "draws.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["alpha", "delta_1", "delta_2", "theta_0", "theta_1", "theta_2", "sigma2"]
    manifest = json.loads((workdir / "out" / "manifest_fit.json").read_text())
    assert manifest["seed"] == 11
    assert set(manifest["artifacts"]) == {"fit.json", "draws.csv"}
    fit = json.loads((workdir / "out" / "fit.json").read_text())
    assert fit["run"]["config_sha256"] == manifest["config_sha256"]


def test_missing_outcome_column_exits_2(workdir, capsys):
    cfg = _config(workdir, data={"csv": "panel.csv", "schema": dict(SCHEMA, outcome="overdoses")})
    assert main(["fit", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert "overdoses" in err["message"]


def test_fit_is_byte_identical_across_runs(workdir):
    cfg = _config(workdir, fit={"method": "bayes"})
    assert main(["fit", str(cfg), "--output-dir", str(workdir / "a")]) == 0
    assert main(["fit", str(cfg), "--output-dir", str(workdir / "b")]) == 0
    assert _files(workdir / "a") == _files(workdir / "b")


def test_estimate_writes_one_file_per_request(workdir):
    cfg = _config(workdir)
    assert main(["fit", str(cfg)]) == 0
    assert main(["estimate", str(cfg)]) == 0
    out = workdir / "out"
    results = sorted(p.name for p in out.glob("estimand_*.json"))
    assert results == ["estimand_00_satt_avg.json", "estimand_01_satt_by_period.json"]
    per_period = list(csv.DictReader(open(out / "estimand_01_satt_by_period.csv", newline="")))
    assert len(per_period) == 3


def test_sapo_grid_csv_has_one_row_per_level(tmp_path):
    schema = _panel_csv(tmp_path / "panel.csv", two_policies=True)
    levels = [{"a": a, "m": m} for a in (0.0, 1.0) for m in (0.0, 1.0)]
    cfg = _config(tmp_path, data={"csv": "panel.csv", "schema": schema},
                  model={"k": 1, "l": 0, "policies": ["a", "m"], "include_interactions": True},
                  estimands=[{"kind": "sapo", "levels": levels, "n_draws": 200}])
    assert main(["fit", str(cfg)]) == 0
    assert main(["estimate", str(cfg)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "estimand_00_sapo.csv", newline="")))
    assert len(rows) == 4


def test_estimate_refuses_mismatched_fit(workdir, capsys):
    assert main(["fit", str(_config(workdir))]) == 0
    other = _config(workdir, model={"k": 1, "l": 0, "policies": ["treat"]})
    assert main(["estimate", str(other)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "SpecMismatchError"


def test_null_pipeline_intervals_cover_zero(tmp_path):
    _panel_csv(tmp_path / "panel.csv", theta0=0.0, seed=5)
    cfg = _config(tmp_path, estimands=[{"kind": "satt_avg", "n_draws": 2000},
                                      {"kind": "satt_by_period", "n_draws": 2000}])
    assert main(["fit", str(cfg)]) == 0
    assert main(["estimate", str(cfg)]) == 0
    out = tmp_path / "out"
    overall = json.loads((out / "estimand_00_satt_avg.json").read_text())
    assert overall["interval"][0] < 0 < overall["interval"][1]
    for row in csv.DictReader(open(out / "estimand_01_satt_by_period.csv", newline="")):
        assert float(row["lo"]) < 0 < float(row["hi"])


def test_compare_and_diagnose(workdir):
    cfg = _config(workdir)
    assert main(["compare", str(cfg)]) == 0
    assert main(["diagnose", str(cfg)]) == 0
    out = workdir / "out"
    assert sorted(p.name for p in out.glob("comparator_*.json")) == [
        "comparator_00_twfe.json", "comparator_01_did_gt.json", "comparator_02_synth.json"]
    diag = json.loads((out / "diagnostic.json").read_text())
    assert {"ratio", "adjusted_ratio", "flag"} <= set(diag)


def test_simulate_grid_shape_and_determinism(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({
        "seed": 3, "output_dir": "out",
        "simulation": {"n_reps": 1, "estimators": ["dam", "twfe", "did_gt", "synth"],
                       "estimator_config": {"n_boot": 49, "n_draws": 100}},
    }))
    assert main(["simulate", str(cfg), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["simulate", str(cfg), "--output-dir", str(tmp_path / "b")]) == 0
    reports = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert len(reports) == 9
    assert all(sorted(r["metrics"]) == ["dam", "did_gt", "synth", "twfe"] for r in reports)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_config_cannot_mix_modes(workdir):
    cfg = _config(workdir, simulation={"n_reps": 1})
    assert main(["fit", str(cfg)]) == 2
    assert main(["simulate", str(cfg)]) == 2


def _moments(tmp_path, **kw):
    m = MomentInputs.from_structural(0.7, -0.3, 0.25, 0.125, 1.0625, kw.pop("var_U", 0.0), **kw)
    path = tmp_path / "m.json"
    path.write_text(json.dumps(m.to_dict()))
    return path


def test_bias_zero_error_variance(tmp_path, capsys):
    assert main(["bias", str(_moments(tmp_path))]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["classical"]["bias"] == 0.0
    assert report["general"]["bias"] == pytest.approx(0.0, abs=1e-14)
    assert report["bound"]["bound"] == 0.0


def test_bias_classical_and_general_agree(tmp_path, capsys):
    assert main(["bias", str(_moments(tmp_path, var_U=0.6))]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["general"]["expected"] == pytest.approx(report["classical"]["expected"], abs=1e-12)


def test_bias_inconsistent_moments(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"var_A": 0.25, "var_Y0": 1.0, "cov_A_Y0": 0.9}))
    assert main(["bias", str(path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "InconsistentMomentsError"


def test_writes_only_inside_output_dir(workdir):
    cfg = _config(workdir)
    before = set(workdir.rglob("*"))
    for command in ("fit", "estimate", "compare", "diagnose"):
        assert main([command, str(cfg)]) == 0
    new = set(workdir.rglob("*")) - before
    assert new and all(p == workdir / "out" or (workdir / "out") in p.parents for p in new)


def test_console_entry_point(workdir):
    cfg = _config(workdir)
    proc = subprocess.run([sys.executable, "-m", "dampanel.cli", "compare", str(cfg)],
                          capture_output=True, text=True, cwd=workdir)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "dampanel.cli", "fit", str(workdir / "nope.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
