"""Tests for the pipeline, report emission, experiment tables and the command-line surface"""

import glob
import json
import os

import numpy as np
import pandas as pd
import pytest

from checking import MODEL_OK, CellCheckResult
from cli import (
    EMPIRICAL,
    PreparedData,
    Report,
    coverage_table,
    error_handler,
    error_table,
    experiment_rows,
    main,
    parse_overrides,
    report_emit,
    run_experiment,
    run_pipeline,
    size_bin_table,
)
from config import Config, parse_run_config
from conftest import make_dataset
from dataset import SubpopKey
from errors import (
    CSVParseError,
    ConfigError,
    PopulationSpecError,
    SchemaError,
    StalenessError,
)
from metrics import MetricEstimate, MetricKind

SCHEMA = "attributes=g,h\nlabel=y\nscore=s\ncovariates=c\n"


@pytest.fixture
def isolated(artifact_db, monkeypatch):
    monkeypatch.delenv("MBM_OUTPUT_DIR", raising=False)
    monkeypatch.setattr(Config, "OUTPUT_DIR", "")
    return artifact_db


@pytest.fixture
def csv_inputs(tmp_path):
    data_path = str(tmp_path / "scores.csv")
    schema_path = str(tmp_path / "schema.env")
    make_dataset(n=150, seed=2).save_csv(data_path)
    with open(schema_path, "w", encoding="utf-8") as f:
        f.write(SCHEMA)
    return data_path, schema_path


def csv_args(tmp_path, data_path, schema_path, *extra):
    pairs = [
        "data.source=csv", f"data.csv={data_path}", f"data.schema={schema_path}",
        "empirical_only=true", "subpops.attributes=g", "bootstrap.B=10", f"output.dir={tmp_path / 'out'}",
    ] + list(extra)
    args = []
    for pair in pairs:
        args += ["--set", pair]
    return args


# ==================== ARGUMENTS / ERRORS ====================

def test_parse_overrides():
    assert parse_overrides(["bootstrap.B = 20", "model.fixed.a.formula=S ~ g + Y"]) == {
        "bootstrap.B": "20", "model.fixed.a.formula": "S ~ g + Y",
    }
    assert parse_overrides(None) == {}
    with pytest.raises(ConfigError):
        parse_overrides(["bootstrap.B"])


@pytest.mark.parametrize("exc,code", [
    (ConfigError("bad key"), 2),
    (FileNotFoundError("scores.csv"), 2),
    (SchemaError("column 'y' is missing", "y"), 2),
    (CSVParseError("not a number", row=3), 2),
    (PopulationSpecError("covariance is not PSD"), 2),
    (StalenessError("draws do not match"), 1),
    (RuntimeError("boom"), 1),
])
def test_error_handler_exit_codes(exc, code, capsys):
    assert error_handler(exc) == code
    assert capsys.readouterr().err.strip()


# ==================== REPORT ====================

def sample_report():
    estimate = MetricEstimate(SubpopKey.of(g="a"), MetricKind("FPR", 0.25), 0.1, "fixed.a", "mbm:fixed.a", 40,
                              replicates=np.array([0.1, np.nan, 0.2]),
                              intervals={0.5: (0.1, 0.2), 0.95: (float("nan"), float("nan"))})
    missing = MetricEstimate(SubpopKey(), MetricKind("AUC"), None, error="no positives")
    check = CellCheckResult(SubpopKey.of(g="a"), 0, "fixed.a", 20, -1.0, -1.5, 0.2, MODEL_OK)
    return Report(estimates=[estimate, missing], checks={"fixed.a": [check]},
                  truth={"g=a|FPR": 0.12, "ALL|AUC": None},
                  manifest={"levels": [0.5, 0.95], "seed": 3}, warnings=["fixed.a: slow mixing"])


def test_report_dict_round_trip_is_strict_json():
    data = sample_report().to_dict()
    text = json.dumps(data, allow_nan=False, sort_keys=True)
    restored = Report.from_dict(json.loads(text))
    assert restored.to_dict() == data
    assert np.isnan(restored.estimates[0].intervals[0.95][0])
    assert restored.estimates[1].missing
    assert restored.truth_of(restored.estimates[0]) == 0.12


def test_report_emit_writes_every_table(tmp_path):
    written = report_emit(sample_report(), str(tmp_path))
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["checks.csv", "estimates.csv", "forest.csv", "ppc.csv", "relative_nll.csv",
                     "replicates.csv", "report.json"]
    estimates = pd.read_csv(tmp_path / "estimates.csv")
    assert {"lo50", "hi50", "lo95", "hi95", "n_valid", "n_missing"} <= set(estimates.columns)
    assert estimates.loc[0, "n_missing"] == 1
    forest = pd.read_csv(tmp_path / "forest.csv")
    assert forest.loc[0, "truth"] == pytest.approx(0.12)


# ==================== PIPELINE ====================

def test_empirical_only_pipeline():
    cfg = parse_run_config({"empirical_only": "true", "bootstrap.B": "10", "metrics.threshold": "0.0"})
    d = make_dataset(n=150, seed=1)
    report = run_pipeline(cfg, PreparedData(d, ["g"]), store=False)
    assert len(report.estimates) == 3 * 3
    assert {e.method for e in report.estimates} == {EMPIRICAL}
    assert report.manifest["threshold"] == 0.0
    assert all(e.replicates.shape == (10,) for e in report.estimates)
    assert report.checks == {}


def test_full_pipeline_merges_models_and_fallbacks():
    cfg = parse_run_config({
        "model.fixed.a.formula": "S ~ g + h + Y",
        "model.fixed.b.formula": "S ~ g + h + Y + c",
        "sampler.draws": "150", "sampler.warmup": "100",
        "cv.folds": "3", "cv.draws": "100",
        "bootstrap.B": "5", "bootstrap.r_out": "100",
        "seed": "7",
    })
    d = make_dataset(n=180, seed=5)
    report = run_pipeline(cfg, PreparedData(d, ["g"]), store=False)
    methods = [e.method for e in report.estimates]
    assert {m: methods.count(m) for m in set(methods)} == {"empirical": 9, "fixed.a": 9, "fixed.b": 9, "best.ll": 9}
    assert set(report.checks) == {"fixed.a", "fixed.b"}
    assert set(report.diagnostics) == {"fixed.a", "fixed.b"}
    assert report.ppc
    for e in report.estimates:
        assert e.provenance == EMPIRICAL or e.provenance.startswith(("mbm:", "fallback:"))
    json.dumps(report.to_dict(), allow_nan=False)


def test_reference_model_names_must_exist():
    cfg = parse_run_config({"model.m.formula": "@no.such"})
    with pytest.raises(ConfigError):
        run_pipeline(cfg, PreparedData(make_dataset(n=40), ["g"]), store=False)


# ==================== EXPERIMENT TABLES ====================

def experiment_frame():
    rows = []
    for method, errors, covered in ((EMPIRICAL, (0.2, 0.1), (1.0, 1.0)), ("fixed.b", (0.1, 0.1), (1.0, 0.0))):
        for key, cell_n, error, hit in zip(("g=a", "g=b"), (50, 600), errors, covered):
            rows.append({"regime": "none", "N": 1000, "rep": 0, "key": key, "cell_n": cell_n, "method": method,
                         "metric": "AUC", "point": 0.7, "truth": 0.7 + error, "abs_error": error, "n_valid": 10,
                         "replicate_range": 0.1, "covered95": hit, "width95": 0.2})
    return pd.DataFrame(rows)


def test_error_table_pairs_with_empirical_cells():
    table = error_table(experiment_frame()).set_index("method")
    assert table.loc["fixed.b", "relative_error"] == pytest.approx(0.1 / 0.15)
    assert table.loc[EMPIRICAL, "relative_error"] == pytest.approx(1.0)
    assert table.loc["fixed.b", "cells"] == 2


def test_size_bin_table():
    table = size_bin_table(experiment_frame())
    model = table[table.method == "fixed.b"].set_index("size_bin")
    assert model.loc["(0,100]", "relative_error"] == pytest.approx(0.5)
    assert model.loc[">500", "relative_error"] == pytest.approx(1.0)


def test_coverage_table():
    table = coverage_table(experiment_frame(), [0.5, 0.95])
    assert set(table.level) == {0.95}
    model = table[table.method == "fixed.b"].iloc[0]
    assert model.coverage == pytest.approx(0.5) and model.intervals == 2
    assert model.n_valid_replicates == 20


def test_experiment_rows_score_against_truth():
    report = sample_report()
    rows = experiment_rows(report, "none", 500, 1)
    assert rows[0]["abs_error"] == pytest.approx(0.02)
    assert rows[0]["covered50"] == 1.0
    assert np.isnan(rows[0]["covered95"])
    assert rows[0]["replicate_range"] == pytest.approx(0.1)
    assert np.isnan(rows[1]["abs_error"])


def test_small_empirical_experiment():
    cfg = parse_run_config({
        "empirical_only": "true", "subpops.attributes": "gender",
        "synth.n_pop": "3000", "synth.n": "300",
        "experiment.regimes": "none", "experiment.sizes": "300", "experiment.repetitions": "2",
        "bootstrap.B": "5", "metrics.fpr_target": "0.05",
    })
    tables = run_experiment(cfg)
    rows = tables["experiment_rows"]
    assert set(rows.method) == {EMPIRICAL}
    assert set(rows.rep) == {0, 1}
    np.testing.assert_allclose(tables["experiment_errors"].relative_error, 1.0)
    assert set(tables["experiment_coverage"].level) == {0.5, 0.95}


def test_experiment_needs_synthetic_data(tmp_path, csv_inputs):
    data_path, schema_path = csv_inputs
    cfg = parse_run_config({"data.source": "csv", "data.csv": data_path, "data.schema": schema_path,
                            "empirical_only": "true"})
    with pytest.raises(ConfigError):
        run_experiment(cfg)


# ==================== COMMANDS ====================

def test_estimate_then_report(tmp_path, isolated, csv_inputs):
    args = csv_args(tmp_path, *csv_inputs)
    assert main(args + ["estimate"]) == 0
    [out] = glob.glob(str(tmp_path / "out" / "*"))
    estimates = pd.read_csv(os.path.join(out, "estimates.csv"))
    assert set(estimates.method) == {EMPIRICAL}
    with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
        first = json.load(f)

    os.remove(os.path.join(out, "report.json"))
    assert main(args + ["report"]) == 0
    with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
        assert json.load(f) == first


def test_report_without_stored_run_fails(tmp_path, isolated, csv_inputs):
    assert main(csv_args(tmp_path, *csv_inputs, "seed=99") + ["report"]) == 1


def test_configuration_errors_exit_with_two(tmp_path, isolated, csv_inputs):
    assert main(csv_args(tmp_path, *csv_inputs, "bogus=1") + ["estimate"]) == 2
    assert main(csv_args(tmp_path, str(tmp_path / "missing.csv"), csv_inputs[1]) + ["estimate"]) == 2


def test_simulate_writes_sample_and_truth(tmp_path, isolated):
    args = []
    for pair in ("synth.n_pop=2000", "synth.n=200", "empirical_only=true", "subpops.attributes=gender",
                 f"output.dir={tmp_path / 'out'}"):
        args += ["--set", pair]
    assert main(args + ["simulate", "--population"]) == 0
    [out] = glob.glob(str(tmp_path / "out" / "*"))
    assert len(pd.read_csv(os.path.join(out, "sample.csv"))) == 200
    assert len(pd.read_csv(os.path.join(out, "population.csv"))) == 2000
    with open(os.path.join(out, "truth.json"), encoding="utf-8") as f:
        truth = json.load(f)
    assert truth["values"]
