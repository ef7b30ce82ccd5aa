import json

import pytest

from nfldm.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_defaults_round_trip(tmp_path):
    cfg = PipelineConfig()
    cfg.save(tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg


def test_partial_override_keeps_defaults():
    cfg = config_from_dict({"seed": 3, "lae": {"global_dim": 8}, "world": {"image_size": 16}})
    assert cfg.seed == 3 and cfg.lae.global_dim == 8 and cfg.lae.fine_codebook == 128
    assert cfg.world.image_size == 16


@pytest.mark.parametrize("data, where", [
    ({"bogus": 1}, "bogus"),
    ({"lae": {"nope": 1}}, "lae"),
    ({"seed": "x"}, "seed"),
    ({"seed": 1.5}, "seed"),
    ({"scene_ae": {"explicit_density": 1}}, "explicit_density"),
    ({"scene_ae": {"grid_dims": 8}}, "grid_dims"),
    ({"lae": {"downsample": 3}}, "lae.downsample"),
    ({"lae": {"coarse_z": 3}}, "lae.coarse_z"),
    ({"ddm": {"ddim_steps": 2000}}, "ddm.ddim_steps"),
    ({"ddm": {"beta_start": 0.5, "beta_end": 0.1}}, "ddm.beta_start"),
    ({"guidance": {"gamma": 0.5}}, "guidance.gamma"),
    ({"scene_ae": {"input_frames": [0, 20]}}, "input_frames"),
])
def test_invalid_configs_name_the_field(data, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        config_from_dict(data)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
