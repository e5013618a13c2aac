import json

import numpy as np
import pandas as pd
import pytest

from src import app
from src.app import main
from src.conformal_lpb import train_lpb
from src.errors import NumericalError
from src.model_store import load_bundle
from src.settings_manager import apply_overrides, load_config
from src.survival_data import read_dataset


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"n_trees": 10, "min_leaf": 5, "seed": 2}))
    return path


@pytest.fixture
def dataset_csv(tmp_path):
    path = tmp_path / "data.csv"
    assert main(["simulate", "--setting", "3", "--rows", "200", "--seed", "7", "--out", str(path)]) == 0
    return path


def read_output(path):
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def test_simulate_writes_a_reproducible_file(dataset_csv, tmp_path):
    again = tmp_path / "again.csv"
    assert main(["simulate", "--setting", "3", "--rows", "200", "--seed", "7", "--out", str(again)]) == 0
    assert again.read_bytes() == dataset_csv.read_bytes()
    frame = read_output(dataset_csv)
    assert list(frame.columns) == ["x1", "ctime", "otime", "true_time"]
    assert len(frame) == 200
    assert dataset_csv.read_text().startswith("# conformal-survival")


def test_unknown_setting_is_a_usage_error(tmp_path):
    assert main(["simulate", "--setting", "9", "--rows", "10", "--out", str(tmp_path / "x.csv")]) == 1


def test_missing_subcommand_and_bad_flags():
    assert main([]) == 1
    assert main(["simulate", "--rows", "ten"]) == 1


@pytest.mark.parametrize("method", ["baseline", "adaptive-CT"])
def test_cli_predictions_match_the_library(method, dataset_csv, small_config, tmp_path):
    bundle = tmp_path / f"model-{method}"
    out = tmp_path / "lpb.csv"
    assert main(["train", "--data", str(dataset_csv), "--out", str(bundle),
                 "--config", str(small_config), "--method", method]) == 0
    assert (bundle / "config.json").exists()
    assert main(["predict", "--bundle", str(bundle), "--covariates", str(dataset_csv), "--out", str(out)]) == 0

    predicted = read_output(out)
    assert list(predicted.columns) == ["lpb", "vacuous"]
    data = read_dataset(dataset_csv)
    config = apply_overrides(load_config(small_config), method=method)
    model, _, _ = train_lpb(data, config)
    np.testing.assert_array_equal(predicted["lpb"].to_numpy(), model.predict(data.X))
    np.testing.assert_array_equal(predicted["vacuous"].to_numpy(), model.vacuous(data.X).astype(int))
    np.testing.assert_array_equal(load_bundle(bundle).predict(data.X), model.predict(data.X))


def test_trace_file_lists_every_knot(dataset_csv, small_config, tmp_path):
    bundle = tmp_path / "model"
    assert main(["train", "--data", str(dataset_csv), "--out", str(bundle), "--config", str(small_config),
                 "--method", "adaptive-T", "--alpha", "0.2"]) == 0
    trace = read_output(bundle / "calibration_trace.csv")
    model = load_bundle(bundle)
    assert model.alpha == 0.2
    np.testing.assert_array_equal(trace["knot"].to_numpy(), model.calibration.knots)
    assert np.all(np.diff(trace["running_sup"].to_numpy()) >= 0)


def test_empty_covariates_give_an_empty_table(dataset_csv, small_config, tmp_path):
    bundle = tmp_path / "model"
    assert main(["train", "--data", str(dataset_csv), "--out", str(bundle), "--config", str(small_config),
                 "--method", "baseline"]) == 0
    empty = tmp_path / "empty.csv"
    empty.write_text("x1\n")
    out = tmp_path / "lpb.csv"
    assert main(["predict", "--bundle", str(bundle), "--covariates", str(empty), "--out", str(out)]) == 0
    frame = read_output(out)
    assert list(frame.columns) == ["lpb", "vacuous"]
    assert len(frame) == 0


def test_dimension_mismatch_is_a_data_error(dataset_csv, small_config, tmp_path):
    bundle = tmp_path / "model"
    assert main(["train", "--data", str(dataset_csv), "--out", str(bundle), "--config", str(small_config),
                 "--method", "baseline"]) == 0
    wide = tmp_path / "wide.csv"
    wide.write_text("x1,x2\n1.0,2.0\n")
    assert main(["predict", "--bundle", str(bundle), "--covariates", str(wide), "--out", str(tmp_path / "o.csv")]) == 2


def test_evaluate_writes_scores(dataset_csv, small_config, tmp_path):
    bundle = tmp_path / "model"
    report = tmp_path / "scores.json"
    held_out = tmp_path / "held_out.csv"
    assert main(["simulate", "--setting", "3", "--rows", "300", "--seed", "8", "--out", str(held_out)]) == 0
    assert main(["train", "--data", str(dataset_csv), "--out", str(bundle), "--config", str(small_config),
                 "--method", "baseline"]) == 0
    assert main(["evaluate", "--bundle", str(bundle), "--data", str(held_out), "--out", str(report)]) == 0
    scores = json.loads(report.read_text())
    assert scores["method"] == "baseline"
    assert scores["beta_lo"] <= scores["coverage"] <= scores["beta_hi"]


def test_exit_codes(dataset_csv, small_config, tmp_path, monkeypatch):
    out = str(tmp_path / "model")
    assert main(["train", "--data", str(tmp_path / "absent.csv"), "--out", out]) == 2
    assert main(["train", "--data", str(dataset_csv), "--out", out, "--method", "nope"]) == 1
    assert main(["train", "--data", str(dataset_csv), "--out", out, "--alpha", "2"]) == 1

    def explode(data, config):
        raise NumericalError("Hessian is not finite")

    monkeypatch.setattr(app, "train_lpb", explode)
    assert main(["train", "--data", str(dataset_csv), "--out", out, "--config", str(small_config)]) == 3


def test_plain_value_errors_are_data_errors(dataset_csv, small_config, tmp_path, monkeypatch, capsys):
    def reject(data, config):
        raise ValueError("array must not contain infs or NaNs")

    monkeypatch.setattr(app, "train_lpb", reject)
    out = str(tmp_path / "model")
    assert main(["train", "--data", str(dataset_csv), "--out", out, "--config", str(small_config)]) == 2
    assert "infs or NaNs" in capsys.readouterr().err
    assert main(["train", "--data", str(dataset_csv), "--out", out, "--method", "nope"]) == 1


def test_benchmark_files_are_reproducible(small_config, tmp_path):
    args = ["benchmark", "--setting", "1", "--trials", "2", "--methods", "baseline,adaptive-CT",
            "--sizes", "60,60,100", "--workers", "1", "--config", str(small_config)]
    assert main(args + ["--prefix", str(tmp_path / "a")]) == 0
    assert main(args + ["--prefix", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a_trials.csv").read_bytes()
    assert first == (tmp_path / "b_trials.csv").read_bytes()
    assert (tmp_path / "a_summary.json").exists()
    assert (tmp_path / "a_timing.csv").exists()


def test_benchmark_rejects_bad_arguments(tmp_path):
    prefix = str(tmp_path / "x")
    assert main(["benchmark", "--methods", "baseline,nope", "--trials", "1", "--prefix", prefix]) == 1
    assert main(["benchmark", "--sizes", "60,60", "--trials", "1", "--prefix", prefix]) == 1
