import pytest

from voladapt.config import (Config, config_from_dict, config_to_dict,
                             load_config, save_config)
from voladapt.nets import ConfigError


class TestDefaults:
    def test_defaults(self):
        cfg = Config()
        assert cfg.seed == 1234
        assert cfg.preset == "c3"
        assert cfg.source == "A" and cfg.target == "B"
        assert cfg.segnet.input_size == 64
        assert cfg.autoencoder.input_size == 64
        assert {d.name for d in cfg.domains} == {"A", "B", "C"}
        assert set(cfg.stages) == {"AE", "SEG", "CLS", "COMBINED"}

    def test_domain_lookup(self):
        cfg = Config()
        assert cfg.domain("B").name == "B"
        with pytest.raises(ConfigError):
            cfg.domain("Z")


class TestFromDict:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({"sed": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="segnet"):
            config_from_dict({"segnet": {"input_sizes": 32}})

    def test_unknown_stage(self):
        with pytest.raises(ConfigError, match="stage"):
            config_from_dict({"stages": {"WARMUP": {"epochs": 1}}})

    def test_stage_override_merges(self):
        cfg = config_from_dict({"stages": {"SEG": {"epochs": 3,
                                                   "optim": {"lr": 0.01}}}})
        assert cfg.stages["SEG"].epochs == 3
        assert cfg.stages["SEG"].optim.lr == 0.01
        # untouched fields keep their published defaults
        assert cfg.stages["SEG"].optim.kind == "adam"
        assert cfg.stages["AE"].epochs == 100

    def test_invalid_value_surfaces_as_config_error(self):
        with pytest.raises(ConfigError):
            config_from_dict({"segnet": {"input_size": 33}})

    def test_tuple_fields_coerced(self):
        cfg = config_from_dict({"domains": [
            {"name": "X", "azimuth_deg": [80.0, 1.0], "elevation_deg": [80.0, 1.0],
             "resolution_mm": [1.0, 0.1], "split": [1, 1, 1]}]})
        assert cfg.domains[0].split == (1, 1, 1)


class TestRoundTrip:
    def test_yaml_roundtrip_preserves_everything(self, tmp_path):
        cfg = config_from_dict({
            "seed": 99, "target_size": 32, "preset": "c1",
            "segnet": {"input_size": 32, "levels": 2, "base_channels": 4},
            "autoencoder": {"input_size": 32, "base_channels": 4},
            "loss_weights": {"e_adv": 2, "alpha": 0.5},
            "stages": {"COMBINED": {"epochs": 7, "cls_optim": None}},
        })
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        back = load_config(path)
        assert config_to_dict(back) == config_to_dict(cfg)
        assert back.stages["COMBINED"].epochs == 7
        assert back.stages["COMBINED"].cls_optim is None
        assert back.loss_weights.e_adv == 2

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        cfg = load_config(path)
        assert cfg.seed == 1234
