import json

import pytest

from netdef.config import RunConfig, load_run_config
from netdef.ppo import DEFAULT_LEARNING_RATES


def test_defaults_round_trip():
    config = RunConfig()
    assert RunConfig.from_dict(config.to_dict()) == config


def test_learning_rate_defaults_follow_policy_family():
    entity = RunConfig.from_dict({"policy": "entity"})
    mlp = RunConfig.from_dict({"policy": "mlp"})
    assert entity.ppo.learning_rate == DEFAULT_LEARNING_RATES["entity"]
    assert mlp.ppo.learning_rate == DEFAULT_LEARNING_RATES["mlp"]


def test_explicit_learning_rate_wins():
    config = RunConfig.from_dict({"policy": "mlp", "ppo": {"learning_rate": 0.123}})
    assert config.ppo.learning_rate == 0.123


def test_partial_sections_fill_defaults():
    config = RunConfig.from_dict({"nodes": 20, "game": {"episode_length": 50}})
    assert config.nodes == 20
    assert config.game.episode_length == 50
    assert config.game.red_skill == 0.5
    assert config.entity.d_model == 64


def test_rejects_unknown_policy_family():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"policy": "transformer"})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"mode": "adversarial"})


def test_load_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"policy": "entity", "nodes": 12, "seed": 4}))
    config = load_run_config(path)
    assert config.nodes == 12
    assert config.seed == 4


def test_load_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'policy = "mlp"\nnodes = 8\nseed = 2\n\n[ppo]\ntotal_steps = 1000\n'
        "num_envs = 2\nrollout_len = 5\nminibatches = 2\n\n[game]\nepisode_length = 10\n"
    )
    config = load_run_config(path)
    assert config.policy == "mlp"
    assert config.ppo.total_steps == 1000
    assert config.ppo.learning_rate == DEFAULT_LEARNING_RATES["mlp"]
    assert config.game.episode_length == 10


def test_load_rejects_unknown_extension(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("policy: entity\n")
    with pytest.raises(ValueError):
        load_run_config(path)
