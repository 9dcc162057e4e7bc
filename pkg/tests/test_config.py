import json

import pytest

from dest_qa.config import DATA_KEYS, ConfigError, TrainConfig, check_compatible


def test_defaults_are_valid_and_desk_scale():
    config = TrainConfig()
    assert config.embedding_size % config.num_heads == 0
    assert config.num_videos_k == 4
    assert config.event_count == 16
    assert config.projection_dim == config.embedding_size // 2


def test_full_scale_values():
    config = TrainConfig.full_scale()
    assert config.embedding_size == 768
    assert config.num_heads == 12
    assert config.ffn_size == 3072
    assert config.num_videos_k == 8
    assert (config.num_frames_t, config.num_frames_t_eval) == (16, 8)
    assert config.lr_mlp == 2.5e-4


def test_json_round_trip(tmp_path):
    config = TrainConfig(embedding_size=48, num_heads=6, loss_weighting="uncertainty", seed=3)
    path = tmp_path / "config.json"
    path.write_text(config.to_json())
    assert TrainConfig.from_json(path) == config


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="Unknown config keys: bogus"):
        TrainConfig.from_dict({"embedding_size": 32, "bogus": 1})


@pytest.mark.parametrize(
    "data",
    [
        {"embedding_size": "32"},
        {"embedding_size": True},
        {"dropout": "0.1"},
        {"loss_weighting": 1},
        {"embedding_size": None},
    ],
)
def test_value_types_checked(data):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(data)


def test_projection_size_may_be_null():
    assert TrainConfig.from_dict({"projection_size": None}).projection_dim == 16


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        TrainConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        TrainConfig.from_json(bad)
    listed = tmp_path / "list.json"
    listed.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError, match="JSON object"):
        TrainConfig.from_json(listed)


@pytest.mark.parametrize(
    "overrides",
    [
        {"embedding_size": 30, "num_heads": 4},
        {"dropout": 1.0},
        {"warmup": 1.5},
        {"loss_weighting": "average"},
        {"num_videos_k": 1},
        {"num_videos_k": 17},
        {"duration_min": 5, "duration_max": 4},
        {"init_temperature": 0.0},
        {"event_count": 1},
    ],
)
def test_invalid_values_rejected(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_config_error_is_a_value_error():
    assert issubclass(ConfigError, ValueError)


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("DEST_SEED", "42")
    assert TrainConfig().seed == 42


def test_diff_and_compatibility():
    a = TrainConfig()
    b = a.replace(embedding_size=64, lr_base=1e-3)
    assert a.diff(b) == {"embedding_size": (32, 64), "lr_base": (5e-4, 1e-3)}
    assert a.diff(b, DATA_KEYS) == {"embedding_size": (32, 64)}

    # optimization keys do not shape data or parameters
    check_compatible(a, a.replace(lr_base=1e-3).to_dict())
    with pytest.raises(ConfigError, match="embedding_size=\\(32, 64\\)"):
        check_compatible(a, b.to_dict())
