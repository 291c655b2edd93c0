import json

import pytest

from sancdifi.config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config, quickstart_config


def test_round_trip(tmp_path):
    cfg = quickstart_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    assert load_config(path) == cfg


def test_partial_config_keeps_defaults():
    cfg = config_from_dict({"sancdifi": {"T1": 450}, "master_seed": 3})
    assert cfg.sancdifi.T1 == 450
    assert cfg.sancdifi.T2 == RunConfig().sancdifi.T2
    assert cfg.master_seed == 3


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"sancdifi": {"T1": "300"}},
    {"sancdifi": {"T1": 3.5}},
    {"sancdifi": {"final_step_noise": 1}},
    {"experiment": {"attacks": "badnet"}},
    {"models": []},
    [],
])
def test_rejects_malformed(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_ints_accepted_for_floats():
    assert config_from_dict({"sancdifi": {"d": 1}}).sancdifi.d == 1.0
    assert config_from_dict({"attack": {"pgd": {"step_size": None}}}).attack.pgd.step_size is None
