"""Run configuration loading and precedence."""

import json

import pytest

from aharness.config import RunConfig, load_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.budget == 3.0
    assert cfg.delta == 0.8
    assert cfg.omega_floor == 0.5
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (0.5, 0.3, 0.2)
    assert cfg.top_n == 2
    assert cfg.cs_capacity == 1000
    assert cfg.tt_capacity == 80


def test_file_values(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"budget": 5, "delta": 0.7}))
    cfg = load_config(str(path))
    assert cfg.budget == 5.0 and cfg.delta == 0.7


def test_env_overrides_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"budget": 5}))
    cfg = load_config(str(path), env={"AHARNESS_BUDGET": "7"})
    assert cfg.budget == 7.0


def test_explicit_overrides_env(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"budget": 5}))
    cfg = load_config(str(path), overrides={"budget": 9},
                      env={"AHARNESS_BUDGET": "7"})
    assert cfg.budget == 9.0


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"budgett": 5}))
    with pytest.raises(ValueError):
        load_config(str(path))


def test_invalid_mode_rejected():
    with pytest.raises(ValueError):
        RunConfig(mode="hybrid")


def test_replaced_returns_copy():
    cfg = RunConfig()
    other = cfg.replaced(budget=6)
    assert other.budget == 6.0 and cfg.budget == 3.0


def test_verifier_config_weights_normalized():
    vcfg = RunConfig(alpha=1.0, beta=0.6, gamma=0.4).verifier_config()
    assert vcfg.alpha + vcfg.beta + vcfg.gamma == pytest.approx(1.0)


def test_config_snapshot_roundtrip():
    cfg = RunConfig(budget=4, delta=0.75, seed=99)
    again = RunConfig(**cfg.to_json())
    assert again.to_json() == cfg.to_json()
