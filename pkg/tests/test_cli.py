import csv
import logging
import subprocess
import sys

import numpy as np
import pytest

from datagen import make_census, make_sample
from saeboost import cli, megb
from saeboost.core import Schema, write_csv

FAST = ["--covariates", "x1,x2", "--eta", "0.2", "--max-rounds", "30", "--early-stop-patience", "10",
        "--iter-max", "10", "--tol", "1e-3"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    sample = make_sample(rng, [8, 6, 10, 5], sigma_v=1.0, labels=["n1", "n2", "n3", "n4"])
    census = make_census(rng, [30, 20, 25, 15, 10], labels=["n1", "n2", "n3", "n4", "far"])
    write_csv(sample, d / "survey.csv", Schema("area", ("x1", "x2"), "y"))
    write_csv(census, d / "census.csv", Schema("area", ("x1", "x2")))
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fitted(files):
    out = files / "fit"
    assert run("fit", "--survey", files / "survey.csv", "--out", out, "--seed", 4, *FAST) == 0
    return out


def read_report(path):
    return dict(line.rstrip("\n").split("\t", 1) for line in open(path))


def test_fit_writes_model_and_report(fitted):
    report = read_report(fitted / "fit_report.txt")
    trace = report["gll_trace"].split(",")
    assert len(trace) == int(report["iterations"])
    assert report["converged"] in ("true", "false")
    assert report["n_areas"] == "4" and report["seed"] == "4"
    assert report["stream.boost"].startswith("entropy=4")
    with open(fitted / "model.txt") as fh:
        model = megb.load_model(fh)
    assert model.iterations == int(report["iterations"])


def test_single_pass_fit(files, tmp_path):
    assert run("fit", "--survey", files / "survey.csv", "--out", tmp_path, *FAST, "--tol", "inf") == 0
    assert read_report(tmp_path / "fit_report.txt")["iterations"] == "1"


def test_predict_csv(files, fitted, tmp_path):
    assert run("predict", "--model", fitted / "model.txt", "--census", files / "census.csv",
               "--covariates", "x1,x2", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "estimates.csv")))
    assert [r["area_id"] for r in rows] == ["n1", "n2", "n3", "n4", "far"]
    assert [r["in_sample"] for r in rows] == ["true"] * 4 + ["false"]
    with open(fitted / "model.txt") as fh:
        model = megb.load_model(fh)
    census_rows = list(csv.DictReader(open(files / "census.csv")))
    far = np.array([[float(r["x1"]), float(r["x2"])] for r in census_rows if r["area"] == "far"])
    assert float(rows[-1]["mu_hat"]) == pytest.approx(model.fixed_part(far).mean(), rel=1e-14)
    for r in rows:
        n = sum(c["area"] == r["area_id"] for c in census_rows)
        assert float(r["total_hat"]) == pytest.approx(n * float(r["mu_hat"]), rel=1e-12)

    first = (tmp_path / "estimates.csv").read_bytes()
    run("predict", "--model", fitted / "model.txt", "--census", files / "census.csv",
        "--covariates", "x1,x2", "--out", tmp_path)
    assert (tmp_path / "estimates.csv").read_bytes() == first


def test_predict_one_row_census(fitted, tmp_path):
    (tmp_path / "c.csv").write_text("area,x1,x2\nn2,0.5,-0.5\n")
    assert run("predict", "--model", fitted / "model.txt", "--census", tmp_path / "c.csv",
               "--covariates", "x1,x2", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "estimates.csv")))
    assert len(rows) == 1 and rows[0]["mu_hat"] == rows[0]["total_hat"]


def test_predict_dimension_mismatch(fitted, tmp_path, capsys):
    (tmp_path / "c.csv").write_text("area,x1\nn2,0.5\n")
    assert run("predict", "--model", fitted / "model.txt", "--census", tmp_path / "c.csv",
               "--covariates", "x1", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert err.startswith("saeboost predict: error:") and "covariates" in err
    assert not (tmp_path / "estimates.csv").exists()


def test_mse_single_replicate_and_rerun(files, fitted, tmp_path, caplog):
    args = ["mse", "--model", fitted / "model.txt", "--survey", files / "survey.csv",
            "--census", files / "census.csv", "--covariates", "x1,x2", "--b", 1, "--seed", 8]
    with caplog.at_level(logging.INFO, logger="saeboost"):
        assert run(*args, "--out", tmp_path / "a") == 0
    assert sum("replicate 1/1" in m for m in caplog.messages) == 1
    assert run(*args, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "mse.csv").read_bytes()
    assert a == (tmp_path / "b" / "mse.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "mse.csv")))
    assert len(rows) == 5 and all(r["B"] == "1" for r in rows)
    assert all(float(r["rmse"]) ** 2 == pytest.approx(float(r["mse"]), rel=1e-12) for r in rows)


def test_mse_needs_seed(files, fitted, tmp_path, capsys):
    code = run("mse", "--model", fitted / "model.txt", "--survey", files / "survey.csv",
               "--census", files / "census.csv", "--covariates", "x1,x2", "--b", 1, "--out", tmp_path)
    assert code == 1 and "--seed" in capsys.readouterr().err


def test_simulate_small_and_deterministic(tmp_path):
    args = ["simulate", "--scenario", "Linear-Normal", "--n-mc", 1, "--estimators", "BHF",
            "--seed", 3, "--area-size", 60]
    assert run(*args, "--out", tmp_path / "a") == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "results.csv")))
    assert len(rows) == 50 and {r["estimator"] for r in rows} == {"BHF"}
    assert run(*args, "--out", tmp_path / "b", "--n-jobs", 2) == 0
    for name in ("results.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_rejects_unknown_estimator(tmp_path, capsys):
    assert run("simulate", "--estimators", "EBP-BC", "--seed", 1, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    for name in ("HT", "BHF", "MEGB", "MEGB-tuned"):
        assert name in err
    assert run("simulate", "--scenario", "Cubic", "--seed", 1, "--out", tmp_path) == 1
    assert "Linear-Normal" in capsys.readouterr().err


def test_tune_echo_selection_and_round_trip(files, tmp_path):
    base = ["tune", "--survey", files / "survey.csv", "--covariates", "x1,x2", "--max-rounds", 40]
    assert run(*base, "--grid", "eta:0.07; max_depth:2", "--out", tmp_path / "one") == 0
    params = cli.read_config(tmp_path / "one" / "params.txt")
    assert float(params["eta"]) == 0.07 and int(params["max_depth"]) == 2

    assert run(*base, "--grid", "eta:0.001,0.2", "--seed", 2, "--out", tmp_path / "two") == 0
    log = list(csv.DictReader(open(tmp_path / "two" / "tune_log.csv")))
    assert len(log) == 2
    best = min(log, key=lambda r: float(r["holdout_rmse"]))
    assert best["selected"] == "true" and float(best["value"]) == 0.2
    assert float(cli.read_config(tmp_path / "two" / "params.txt")["eta"]) == 0.2

    assert run("fit", "--survey", files / "survey.csv", "--covariates", "x1,x2",
               "--params", tmp_path / "two" / "params.txt", "--out", tmp_path / "fit") == 0
    with open(tmp_path / "fit" / "model.txt") as fh:
        assert megb.load_model(fh).params.eta == 0.2


def test_tune_empty_grid(files, tmp_path, capsys):
    assert run("tune", "--survey", files / "survey.csv", "--covariates", "x1,x2", "--grid", ";",
               "--out", tmp_path) == 1
    assert "empty" in capsys.readouterr().err


def test_config_layering(files, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nsurvey = %s\ncovariates = x1,x2\ntol = inf\nmax_rounds = 5\n" % (files / "survey.csv"))
    assert run("fit", "--config", cfg, "--out", tmp_path / "a") == 0
    with open(tmp_path / "a" / "model.txt") as fh:
        m = megb.load_model(fh)
    assert m.iterations == 1 and m.params.max_rounds == 5
    assert run("fit", "--config", cfg, "--max-rounds", 7, "--lambda", 2.5, "--out", tmp_path / "b") == 0
    with open(tmp_path / "b" / "model.txt") as fh:
        m = megb.load_model(fh)
    assert m.params.max_rounds == 7 and m.params.reg_lambda == 2.5

    cfg.write_text("bogus = 1\n")
    with pytest.raises(cli.CliError):
        cli.read_config(cfg)


def test_bad_survey_reports_error(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("area,x1,x2\na,1,2\n")
    assert run("fit", "--survey", tmp_path / "s.csv", "--covariates", "x1,x2", "--out", tmp_path) == 1
    assert "'y'" in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "saeboost.cli", "fit", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--lambda" in out.stdout and "--n-mc" in out.stdout
