import json

import numpy as np
import pytest

from prsmpc import cli
from prsmpc.exceptions import ConfigError


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def custom_doc(**overrides):
    doc = {
        "name": "scalar", "A": [[1.0]], "B": [[1.0]], "K": [[-0.5]],
        "disturbance": {"Sigma_w": [[0.1]]},
        "state_constraints": {"lower": [-2.0], "upper": [2.0]},
        "Q": [[1.0]], "R": [[1.0]], "x0": [1.0], "horizon": 5, "n_steps": 10,
        "p_x": 0.8, "p_u": 0.8, "variants": ["rec"],
    }
    doc.update(overrides)
    return doc


def write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_invalid_scenario_exits_2(capsys, tmp_path):
    code, _, err = run(["run", "--scenario", "nope", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(err)["field"] == "scenario"


@pytest.mark.parametrize("argv, field", [
    (["run", "--trials", "0"], "trials"),
    (["run", "--variants", "rec,xyz"], "variants"),
    (["run", "--level-rule", "uniform"], "level_rule"),
    (["run", "--bogus-flag"], "arguments"),
    (["run", "--scenario", "custom"], "config"),
])
def test_config_errors_name_the_field(argv, field, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and json.loads(err)["field"] == field


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    code, text, _ = run(["run", "--scenario", "double_integrator", "--variants", "rec", "--trials", "3",
                         "--seed", "7", "--horizon", "10", "--out", str(out)], capsys)
    assert code == 0 and "rec" in text
    metrics = json.loads((out / "metrics.json").read_text())
    stats = metrics["variants"]["rec"]
    assert {"j_cl_0", "j_cl_20", "max_violation"} <= set(stats)
    assert (out / "trace_rec.csv").exists() and (out / "schedule.csv").exists()
    assert (out / "metrics.csv").read_text().startswith("variant,")


def test_metrics_json_is_byte_identical(tmp_path, capsys):
    args = ["run", "--variants", "rec", "--trials", "2", "--horizon", "10", "--seed", "3"]
    run(args + ["--out", str(tmp_path / "a")], capsys)
    run(args + ["--out", str(tmp_path / "b"), "--n-jobs", "2"], capsys)
    assert (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()


def test_building_trace_schema(tmp_path, capsys):
    out = tmp_path / "b"
    code, _, _ = run(["run", "--scenario", "building", "--trials", "1", "--horizon", "6",
                      "--out", str(out)], capsys)
    assert code == 0
    header = (out / "trace_rec.csv").read_text().splitlines()[0].split(",")
    for prefix in ("x", "u", "xbound"):
        assert all(f"{prefix}{i}" in header for i in range(1, 5))


def test_custom_scenario_run(tmp_path, capsys):
    path = write(tmp_path, custom_doc())
    code, _, err = run(["run", "--config", path, "--trials", "2", "--out", str(tmp_path / "c")], capsys)
    assert code == 0, err
    assert json.loads((tmp_path / "c/metrics.json").read_text())["scenario"] == "scalar"


def test_custom_correlated_disturbance(tmp_path, capsys):
    n = 20
    lags = np.subtract.outer(np.arange(n), np.arange(n))
    cov = 0.05 * np.exp(-0.5 * (lags / 3.0) ** 2) + 1e-3 * np.eye(n)
    doc = custom_doc(disturbance={"mean": [0.0] * n, "cov": cov.tolist()}, tightening="per_step")
    code, _, err = run(["run", "--config", write(tmp_path, doc), "--trials", "2",
                        "--out", str(tmp_path / "c")], capsys)
    assert code == 0, err


@pytest.mark.parametrize("doc, field", [
    (custom_doc(A="x"), "A"),
    ({k: v for k, v in custom_doc().items() if k != "Q"}, "Q"),
    (custom_doc(disturbance={"Sigma_w": [[1.0, 0.0]]}), "disturbance"),
    (custom_doc(horizon=2.5), "horizon"),
    (custom_doc(state_constraints={"A": [[1.0]]}), "state_constraints"),
])
def test_custom_scenario_errors(doc, field, tmp_path, capsys):
    code, _, err = run(["validate", "--config", write(tmp_path, doc)], capsys)
    assert code == 2 and json.loads(err)["field"] == field


def test_unreadable_config(tmp_path, capsys):
    code, _, err = run(["validate", "--config", str(tmp_path / "missing.json")], capsys)
    assert code == 2 and json.loads(err)["field"] == "config"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["validate", "--config", str(bad)], capsys)
    assert code == 2


@pytest.mark.parametrize("name", ["double_integrator", "double_integrator_mismatch", "building"])
def test_shipped_scenarios_validate(name, capsys):
    code, out, _ = run(["validate", "--scenario", name], capsys)
    assert code == 0
    assert "FAIL" not in out


def test_validate_reports_empty_tightening(tmp_path, capsys):
    doc = custom_doc(state_constraints={"lower": [-0.1], "upper": [0.1]})
    code, out, _ = run(["validate", "--config", write(tmp_path, doc)], capsys)
    assert code == 1
    assert "EmptyResult" in out


def test_validate_reports_unstable_gain(tmp_path, capsys):
    code, out, _ = run(["validate", "--config", write(tmp_path, custom_doc(K=[[0.5]]))], capsys)
    assert code == 1
    assert "NotStable" in out


def test_run_config_validation():
    with pytest.raises(ConfigError):
        cli.RunConfig(horizon=0)
    cfg = cli.RunConfig(scenario="building", horizon=12)
    assert cli.make_scenario(cfg).horizon == 12
    with pytest.raises(ConfigError):
        cli.make_scenario(cli.RunConfig(horizon=500))
