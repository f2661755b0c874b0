import csv
import hashlib
import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from gmclab.errors import ConfigError, NumericError
from gmclab.gmc import GmcSnapshot
from gmclab.runner import EXPERIMENTS, REGISTRY, Report, config_hash, emit_results, run_experiment, validate_config
from gmclab.runner.cli import cli
from gmclab.runner.config import OUT_ENV


def _cfg(**kw):
    return validate_config({"experiment": "martingale-identities", "seed": 1, **kw})


# -- config -------------------------------------------------------------------


def test_empty_config_lists_required_keys():
    with pytest.raises(ConfigError) as exc:
        validate_config("{}")
    paths = [p for p, _ in exc.value.problems]
    assert paths == ["experiment", "seed"]


def test_minimal_config_defaults():
    cfg = validate_config('{"experiment": "capacity", "seed": 3, "measure": {"scheme": "cantor"}}')
    assert cfg.grid.dt == 0.05 and cfg.replicas == 1000
    assert cfg.truncation.q == 3.0 and cfg.envelope == {"kind": "power", "gamma": 0.3, "scale": 1.0, "offset": 0.0}
    assert cfg.measure.level == 10


def test_unknown_keys_rejected_with_paths():
    with pytest.raises(ConfigError) as exc:
        validate_config({"experiment": "capacity", "seed": 1, "colour": 1, "measure": {"scheme": "cantor", "depth": 3}})
    probs = dict(exc.value.problems)
    assert probs["colour"] == "unknown key" and probs["measure.depth"] == "unknown key"


def test_bad_values_report_paths():
    with pytest.raises(ConfigError) as exc:
        validate_config({"experiment": "convergence", "seed": -1, "grid": {"dt": 0.0, "checkpoints": [2, 1]}})
    paths = {p for p, _ in exc.value.problems}
    assert {"seed", "grid.dt", "grid.checkpoints"} <= paths


def test_unknown_experiment_lists_names():
    with pytest.raises(ConfigError) as exc:
        validate_config({"experiment": "everything", "seed": 1})
    msg = str(exc.value)
    assert all(name in msg for name in EXPERIMENTS)


def test_degeneracy_needs_divergent_schedule():
    with pytest.raises(ConfigError) as exc:
        validate_config(
            {"experiment": "degeneracy", "seed": 1,
             "measure": {"scheme": "cantor", "schedule": {"kind": "power", "gamma": 0.3, "scale": 0.5}}}
        )
    assert exc.value.problems[0][0] == "measure.schedule"
    ok = validate_config({"experiment": "degeneracy", "seed": 1, "measure": {"scheme": "cantor"}})
    assert ok.measure.scheme == "cantor"


def test_convergence_needs_convergent_envelope():
    with pytest.raises(ConfigError) as exc:
        validate_config({"experiment": "convergence", "seed": 1, "envelope": {"kind": "power", "gamma": 0.5}})
    assert exc.value.problems[0][0] == "envelope"


def test_invalid_envelope_and_json():
    with pytest.raises(ConfigError):
        validate_config({"experiment": "envelope-tests", "seed": 1, "envelope": {"kind": "cubic"}})
    with pytest.raises(ConfigError):
        validate_config("{not json")
    with pytest.raises(ConfigError):
        validate_config("[1, 2]")


def test_overrides_and_hash():
    a = validate_config({"experiment": "capacity", "seed": 1, "measure": {"scheme": "cantor"}}, {"seed": 9, "replicas": None})
    assert a.seed == 9 and a.replicas == 1000
    b = validate_config({"experiment": "capacity", "seed": 9, "measure": {"scheme": "cantor"}, "output_dir": "elsewhere"})
    assert config_hash(a) == config_hash(b)
    c = validate_config({"experiment": "capacity", "seed": 8, "measure": {"scheme": "cantor"}})
    assert config_hash(a) != config_hash(c)


# -- emission -----------------------------------------------------------------


def test_empty_report_header_only(tmp_path):
    emit_results(Report("capacity"), tmp_path)
    assert (tmp_path / "data.csv").read_text() == "replica,checkpoint,statistic,value\n"


def test_one_snapshot_one_row_per_statistic(tmp_path):
    snap = GmcSnapshot(2.0, {"M": np.array([0.5]), "D": np.array([1.25])}, math.sqrt(math.pi))
    rep = Report("martingale-identities")
    for name, v in snap.values.items():
        rep.add_values(snap.t, name, v)
    emit_results(rep, tmp_path)
    rows = list(csv.reader(open(tmp_path / "data.csv")))
    assert rows[1:] == [["0", "2.0", "M", "0.5"], ["0", "2.0", "D", "1.25"]]


def test_summary_standard_error(tmp_path):
    v = np.random.default_rng(0).standard_normal(500)
    rep = Report("x")
    mean, se = rep.moments(1.0, "M", v)
    emit_results(rep, tmp_path)
    mom = json.loads((tmp_path / "summary.json").read_text())["moments"][0]
    assert mom["se"] == pytest.approx(v.std(ddof=1) / math.sqrt(500), rel=1e-12)
    assert mom["mean"] == pytest.approx(v.mean(), rel=1e-12)


def test_manifest_hashes_every_output(tmp_path):
    rep = Report("x")
    rep.add_aggregate(0.0, "c", 1.0)
    emit_results(rep, tmp_path, config={"a": 1}, config_sha="abc", seed=4)
    man = json.loads((tmp_path / "manifest.json").read_text())
    for name, digest in man["files"].items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest
    assert set(man["files"]) == {"data.csv", "summary.json"}
    assert man["seed"] == 4 and "numpy" in man["versions"]


# -- runs ---------------------------------------------------------------------


def test_runs_are_byte_identical(tmp_path):
    cfg = _cfg(replicas=120, grid={"checkpoints": [1.0, 2.0]})
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()
    other = _cfg(replicas=120, grid={"checkpoints": [1.0, 2.0]}, seed=2)
    run_experiment(other, tmp_path / "c")
    assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "c" / "data.csv").read_bytes()


def test_brownian_closed_forms_default_run(tmp_path):
    code, rep, _ = run_experiment(validate_config({"experiment": "brownian-closed-forms", "seed": 0}), tmp_path)
    closed = [c for c in rep.checks if "doob" not in c.name]
    assert len(closed) == 3 and all(c.passed for c in closed)
    assert code == 0


def test_martingale_run_checks(tmp_path):
    code, rep, _ = run_experiment(_cfg(replicas=300, grid={"checkpoints": [1.0, 2.0]}), tmp_path)
    names = [c.name for c in rep.checks]
    assert "null set statistics vanish" in names and code == 0


def test_numeric_failure_flushes_partial(tmp_path, monkeypatch):
    def broken(cfg, report):
        report.add_aggregate(0.0, "before", 1.0)
        raise NumericError("matrix not PSD")

    monkeypatch.setitem(REGISTRY, "envelope-tests", broken)
    cfg = validate_config({"experiment": "envelope-tests", "seed": 1})
    code, rep, _ = run_experiment(cfg, tmp_path)
    assert code == 1
    assert "NumericError" in rep.error and "test_runner" in rep.error
    assert "before" in (tmp_path / "data.csv").read_text()
    assert json.loads((tmp_path / "summary.json").read_text())["passed"] is False


def test_output_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    run_experiment(validate_config({"experiment": "envelope-tests", "seed": 1}))
    assert (tmp_path / "env" / "manifest.json").exists()


# -- command line -------------------------------------------------------------


def test_cli_list_and_validate(tmp_path):
    r = CliRunner()
    out = r.invoke(cli, ["list-experiments"])
    assert out.exit_code == 0 and out.output.split() == list(EXPERIMENTS)
    good = tmp_path / "good.json"
    good.write_text('{"experiment": "envelope-tests", "seed": 1}')
    out = r.invoke(cli, ["validate", str(good)])
    assert out.exit_code == 0 and json.loads(out.output)["grid"]["dt"] == 0.05
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert r.invoke(cli, ["validate", str(bad)]).exit_code == 2
    assert r.invoke(cli, ["validate", str(tmp_path / "missing.json")]).exit_code == 2
    assert r.invoke(cli, ["frobnicate"]).exit_code == 2


def test_cli_run_exit_codes(tmp_path):
    r = CliRunner()
    ok = tmp_path / "ok.json"
    ok.write_text('{"experiment": "envelope-tests", "seed": 1}')
    res = r.invoke(cli, ["run", str(ok), "--out", str(tmp_path / "o1")])
    assert res.exit_code == 0 and "PASS" in res.output
    # 64 atoms decouple by t = 4, so the convergence checks fail
    fail = tmp_path / "fail.json"
    fail.write_text('{"experiment": "convergence", "seed": 1, "grid": {"checkpoints": [1, 2, 4]}}')
    res = r.invoke(cli, ["run", str(fail), "--out", str(tmp_path / "o2"), "--replicas", "150", "--seed", "5"])
    assert res.exit_code == 1 and "FAIL" in res.output
    man = json.loads((tmp_path / "o2" / "manifest.json").read_text())
    assert man["seed"] == 5 and man["config"]["replicas"] == 150
