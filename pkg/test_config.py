"""Tests for process settings and run configuration parsing"""

import pytest

from config import Config, load_run_config, parse_run_config, stream_seed
from errors import ConfigError


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv("MBM_OUTPUT_DIR", raising=False)
    monkeypatch.setattr(Config, "OUTPUT_DIR", "")


def base_values(**extra):
    values = {"data.source": "synth", "subpops.attributes": "gender,race", "empirical_only": "true"}
    values.update(extra)
    return values


def test_defaults_for_an_empirical_run():
    cfg = parse_run_config(base_values())
    assert cfg.source == "synth"
    assert cfg.attributes == ["gender", "race"]
    assert cfg.metrics == ["AUC", "FPR", "PPV"]
    assert cfg.fpr_target == 0.01 and cfg.threshold is None
    assert cfg.bootstrap.mode == "importance_weighted"
    assert cfg.bootstrap.levels == [0.5, 0.95]


def test_model_names_may_contain_dots():
    cfg = parse_run_config(base_values(**{
        "empirical_only": "false",
        "model.fixed.b.formula": "S ~ gender + Y",
        "model.fixed.b.sampler": "conjugate",
        "model.rand.a.formula": "S ~ (1 | gender)",
        "model.rand.a.sigma_formula": "sigma ~ Y",
    }))
    assert [m.name for m in cfg.models] == ["fixed.b", "rand.a"]
    assert cfg.model("fixed.b").sampler == "conjugate"
    assert cfg.model("rand.a").sigma_formula == "sigma ~ Y"
    with pytest.raises(ConfigError):
        cfg.model("fixed.z")


def test_typed_values_are_parsed():
    cfg = parse_run_config(base_values(**{
        "metrics": "auc,fpr",
        "metrics.threshold": "0.25",
        "bootstrap.B": "1_000",
        "bootstrap.levels": "0.9",
        "cv.enabled": "no",
        "experiment.sizes": "500,1000",
    }))
    assert cfg.metrics == ["AUC", "FPR"]
    assert cfg.threshold == 0.25
    assert cfg.bootstrap.replicates == 1000
    assert cfg.bootstrap.levels == [0.9]
    assert cfg.cv.enabled is False
    assert cfg.experiment.sizes == [500, 1000]


@pytest.mark.parametrize("key,value", [
    ("bootstrap.B", "many"),
    ("cv.enabled", "maybe"),
    ("metrics.fpr_target", "low"),
])
def test_malformed_values(key, value):
    with pytest.raises(ConfigError):
        parse_run_config(base_values(**{key: value}))


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError) as info:
        parse_run_config(base_values(colour="blue", **{"model.x.weights": "1"}))
    assert "colour" in str(info.value) and "model.x.weights" in str(info.value)


def test_validation_collects_every_violation():
    with pytest.raises(ConfigError) as info:
        parse_run_config({
            "data.source": "csv",
            "metrics": "AUC,TPR",
            "metrics.fpr_target": "1.5",
            "bootstrap.mode": "parametric",
            "cv.folds": "1",
        })
    message = str(info.value)
    for fragment in ("data.csv", "data.schema", "TPR", "fpr_target", "bootstrap.mode", "cv.folds", "model"):
        assert fragment in message


def test_config_hash_ignores_output_dir_only():
    first = parse_run_config(base_values(**{"output.dir": "a"}))
    second = parse_run_config(base_values(**{"output.dir": "b"}))
    third = parse_run_config(base_values(seed="1"))
    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != third.config_hash()


def test_load_run_config_applies_overrides(tmp_path, monkeypatch):
    path = tmp_path / "run.env"
    path.write_text("data.source=synth\nempirical_only=true\nseed=3\n", encoding="utf-8")
    cfg = load_run_config(str(path), {"seed": "9"})
    assert cfg.seed == 9
    monkeypatch.setenv("MBM_OUTPUT_DIR", str(tmp_path / "out"))
    assert load_run_config(str(path)).output_dir == str(tmp_path / "out")
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.env"))


def test_stream_seed_is_deterministic_and_separates_streams():
    assert stream_seed(7, "cv") == stream_seed(7, "cv")
    assert stream_seed(7, "cv") != stream_seed(7, "bootstrap")
    assert stream_seed(7, "cv") != stream_seed(8, "cv")
    assert 0 <= stream_seed(7, "subsample", "none", 1000, 2) < 2 ** 32


def test_process_config_validation(monkeypatch):
    assert Config.validate()
    monkeypatch.setattr(Config, "LOG_LEVEL", "LOUD")
    monkeypatch.setattr(Config, "N_JOBS", 0)
    with pytest.raises(ValueError) as info:
        Config.validate()
    assert "MBM_LOG_LEVEL" in str(info.value) and "MBM_N_JOBS" in str(info.value)
