import json

import pytest

from config import PRESETS, THREADS_ENV, CliConfig, ModelConfig, SaliencyConfig, config_from_dict, \
    config_to_dict, load_config, preset_config, toy_config, worker_threads
from errors import ArgumentError


def test_defaults():
    cfg = CliConfig()
    assert cfg.saliency.fraction == 0.015
    assert (cfg.periodicity.theta_peak, cfg.periodicity.theta_prom, cfg.periodicity.theta_ent) == (0.3, 0.15, 0.7)
    assert (cfg.diffusion.steps, cfg.diffusion.cfg_mask_prob, cfg.diffusion.layers) == (1000, 0.1, 6)
    assert cfg.train.lr == 2e-4 and cfg.model.lambda_init == 0.8


def test_round_trip():
    cfg = CliConfig(model=ModelConfig(d_model=16, heads=2), seed=9)
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"diffusion": {"sample_steps": 4}, "seed": 3}), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.diffusion.sample_steps == 4 and cfg.seed == 3
    assert cfg.diffusion.steps == 1000


@pytest.mark.parametrize("data", [
    {"colour": 1},
    {"model": {"depth": 3}},
    {"model": 5},
    {"saliency": {"fraction": 2.0}},
    {"model": {"d_model": 10, "heads": 4}},
    {"model": {"softmax_axes": "rows"}},
    {"diffusion": {"sample_steps": 0}},
    {"diffusion": {"cond_min_alpha_bar": 1.5}},
    {"diffusion": {"seed": 1}},
    {"train": {"neutral_cond_prob": -0.1}},
])
def test_invalid_configs(data):
    with pytest.raises(ArgumentError):
        config_from_dict(data)


def test_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ArgumentError):
        load_config(path)


def test_weight_mode_validated():
    with pytest.raises(ArgumentError):
        SaliencyConfig(weight_mode="linear")


def test_worker_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert worker_threads() is None
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_threads() == 3
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ArgumentError):
        worker_threads()


def test_toy_preset():
    cfg = toy_config()
    assert cfg.diffusion.layers == 2 and cfg.model.d_model == 32
    assert cfg.diffusion.cond_min_alpha_bar > 0 and cfg.train.neutral_cond_prob > 0
    assert config_from_dict(config_to_dict(cfg)) == cfg
    assert preset_config("toy") == cfg and preset_config("default") == CliConfig()
    assert set(PRESETS) == {"default", "toy"}
    with pytest.raises(ArgumentError):
        preset_config("huge")


def test_file_overrides_base(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"train_steps": 7}}), encoding="utf-8")
    cfg = load_config(path, base=toy_config())
    assert cfg.train.train_steps == 7
    assert cfg.train.lr == toy_config().train.lr and cfg.model.d_model == 32
    path.write_text(json.dumps({"model": {"depth": 3}}), encoding="utf-8")
    with pytest.raises(ArgumentError):
        load_config(path, base=toy_config())


def test_module_switches():
    cfg = ModelConfig(mamba_phase=False)
    assert cfg.phase_in("pdcam") and not cfg.phase_in("mamba")
    assert cfg.keyframes_in("mamba") and cfg.keyframes_in("pdcam")
    off = ModelConfig(use_keyframes=False)
    assert not off.keyframes_in("mamba") and not off.keyframes_in("pdcam")
