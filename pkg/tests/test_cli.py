import csv
import json

import numpy as np
import pytest

from partshape.cli import main

WEEKS = (0, 2, 4, 8, 12, 16)


@pytest.fixture
def data_csv(tmp_path):
    """Visit-schedule data: treatment effect dips until week 4 and recovers."""
    rng = np.random.default_rng(0)
    path = tmp_path / "visits.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "week", "score", "dose", "age"])
        for i in range(40):
            dose, age = rng.integers(0, 2), rng.uniform(-1, 1)
            for wk in WEEKS:
                if rng.random() < 0.1 and wk:
                    continue
                eff = -3 * min(wk, 4) / 4 + 2 * max(wk - 4, 0) / 12
                y = 40 + dose * eff + 0.5 * age + rng.normal(0, 0.8) + rng.normal(0, 0.3)
                w.writerow([f"p{i}", wk, round(y, 4), dose, round(age, 4)])
    return path


def write_config(tmp_path, data_path, extra="", data=True, hyps=True, name="cfg.toml"):
    text = ""
    if data:
        text += f"""
[data]
path = "{data_path}"
id = "patient"
time = "week"
response = "score"
covariates = ["dose", "age"]
intercept = true
"""
    text += """
[run]
engines = ["kernel", "spline"]
B = 30
seed = 11

[kernel]
bandwidth = 4.0

[spline]
knots = [8.0]
"""
    if hyps:
        text += """
[[hypothesis]]
name = "inc_0_4"
constraints = [{ covariate = "dose", shape = "increasing", interval = [0, 4] }]

[[hypothesis]]
name = "dec_4_16"
constraints = [{ covariate = "dose", shape = "decreasing", interval = [4, 16] }]
"""
    text += extra
    path = tmp_path / name
    path.write_text(text)
    return path


def run(*args):
    return main([str(a) for a in args])


def test_test_command_outputs(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv)
    out = tmp_path / "out"
    assert run("test", "--config", cfg, "--out", out) == 0
    rep = json.loads((out / "test_report.json").read_text())
    assert len(rep["reports"]) == 4
    for r in rep["reports"]:
        assert set(r) >= {"d_observed", "p_value", "reject", "alpha", "B", "engine", "d_bootstrap",
                          "hypothesis", "engine_name", "tuning_original_units"}
        assert 0 <= r["p_value"] <= 1 and len(r["d_bootstrap"]) == 30
        assert r["kkt_max"] <= 1e-8
    table = list(csv.reader((out / "pvalues.csv").open()))
    assert table[0] == ["hypothesis", "kernel", "spline"]
    p = {row[0]: [float(v) for v in row[1:]] for row in table[1:]}
    # the effect falls on [0, 4] and rises afterwards: both nulls are false
    assert max(p["inc_0_4"]) < 0.1 and max(p["dec_4_16"]) < 0.1
    assert (out / "timing.json").exists()


def test_test_report_is_byte_identical(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv)
    run("test", "--config", cfg, "--out", tmp_path / "a")
    run("test", "--config", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "test_report.json").read_bytes() == (tmp_path / "b" / "test_report.json").read_bytes()
    run("test", "--config", cfg, "--out", tmp_path / "c", "--seed", 12)
    assert (tmp_path / "a" / "test_report.json").read_bytes() != (tmp_path / "c" / "test_report.json").read_bytes()


def test_fit_writes_grids(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv)
    out = tmp_path / "out"
    assert run("fit", "--config", cfg, "--out", out) == 0
    with (out / "fit_kernel_inc_0_4.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["t"]) == 0.0 and float(rows[-1]["t"]) == 16.0
    assert any(float(r["t"]) == 4.0 for r in rows)
    assert "beta_dose_constrained" in rows[0] and "dbeta_dose_unconstrained" in rows[0]
    inc = [float(r["beta_dose_constrained"]) for r in rows if float(r["t"]) <= 4.0]
    assert np.all(np.diff(inc) >= -1e-9)
    meta = json.loads((out / "fit_spline_dec_4_16.json").read_text())
    assert meta["constraints"]["max_violation"] <= 1e-9
    assert meta["constraints"]["kkt_residual"] <= 1e-8
    assert meta["tuning_original_units"]["knots"]["dose"] == pytest.approx([4.0, 8.0])
    assert json.loads((out / "fit_kernel_inc_0_4.json").read_text())["tuning_original_units"]["bandwidth"] == 4.0


def test_fit_without_hypotheses_is_unconstrained_only(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv, hyps=False)
    out = tmp_path / "out"
    assert run("fit", "--config", cfg, "--out", out) == 0
    header = (out / "fit_spline.csv").read_text().splitlines()[0]
    assert "unconstrained" in header and "_constrained" not in header
    assert "constraints" not in json.loads((out / "fit_spline.json").read_text())


def test_cv_command(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv, hyps=False)
    out = tmp_path / "out"
    assert run("cv", "--config", cfg, "--out", out) == 0
    sel = json.loads((out / "cv.json").read_text())["selections"][0]
    assert sel["kernel"]["selected_bandwidth"] in [pytest.approx(float(k)) for k in sel["kernel"]["errors"]]
    assert sel["spline"]["selected_count"] in range(5)


def test_output_dir_from_environment(tmp_path, data_csv, monkeypatch):
    cfg = write_config(tmp_path, data_csv, hyps=False)
    monkeypatch.setenv("PARTSHAPE_OUT", str(tmp_path / "envout"))
    assert run("cv", "--config", cfg) == 0
    assert (tmp_path / "envout" / "cv.json").exists()


@pytest.mark.parametrize("extra, code", [
    ("\n[simulate]\npreset = 'nope'\n", 2),
    ("", 0),
])
def test_simulate_preset_validation(tmp_path, extra, code):
    body = "[run]\nengines = ['kernel']\nseed = 1\n[kernel]\nbandwidth = 0.2\n[simulate]\nn = 30\nR = 2\nB = 5\n"
    cfg = tmp_path / "sim.toml"
    cfg.write_text(body if not extra else "[run]\nseed = 1\n" + extra)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o", "--threads", 1) == code


def test_simulate_null_quick(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[run]\nseed = 5\n[simulate]\npreset = 'null-quick'\nengines = ['spline']\nR = 10\nB = 50\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o", "--threads", 1) == 0
    d = json.loads((tmp_path / "o" / "simulate_spline" / "montecarlo.json").read_text())
    assert d["scenario"]["n"] == 100 and d["scenario"]["R"] == 10
    assert 0.0 <= d["gamma"]["0.05"] <= 0.2
    assert d["failures"] == 0 and len(d["p_values"]) == 10


def test_config_errors(tmp_path, data_csv):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\n")
    assert run("test", "--config", bad) == 2
    assert run("test", "--config", tmp_path / "missing.toml") == 2
    cfg = write_config(tmp_path, data_csv, extra="", name="e.toml")
    cfg.write_text(cfg.read_text().replace('engines = ["kernel", "spline"]', 'engines = ["magic"]'))
    assert run("test", "--config", cfg, "--out", tmp_path / "o") == 2
    out_of_domain = write_config(tmp_path, data_csv, name="d.toml")
    out_of_domain.write_text(out_of_domain.read_text().replace("interval = [0, 4]", "interval = [0, 20]"))
    assert run("test", "--config", out_of_domain, "--out", tmp_path / "o") == 2
    unknown = write_config(tmp_path, data_csv, name="u.toml")
    unknown.write_text(unknown.read_text().replace('covariate = "dose", shape = "increasing"',
                                                   'covariate = "weight", shape = "increasing"'))
    assert run("test", "--config", unknown, "--out", tmp_path / "o") == 2
    nohyp = write_config(tmp_path, data_csv, hyps=False, name="n.toml")
    assert run("test", "--config", nohyp, "--out", tmp_path / "o") == 2


def test_data_errors(tmp_path, data_csv):
    cfg = write_config(tmp_path, data_csv)
    cfg.write_text(cfg.read_text().replace('"age"', '"height"'))
    assert run("test", "--config", cfg, "--out", tmp_path / "o") == 3
    gone = write_config(tmp_path, tmp_path / "nothing.csv", name="g.toml")
    assert run("fit", "--config", gone, "--out", tmp_path / "o") == 3


def test_numerical_failure(tmp_path, data_csv):
    # a bandwidth far below the visit spacing leaves grid points without data
    cfg = write_config(tmp_path, data_csv)
    cfg.write_text(cfg.read_text().replace("bandwidth = 4.0", "bandwidth = 0.3")
                   .replace('engines = ["kernel", "spline"]', 'engines = ["kernel"]'))
    assert run("fit", "--config", cfg, "--out", tmp_path / "o") == 4
