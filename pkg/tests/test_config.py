import json

import pytest

from palletmask.config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config
from palletmask.core import BoxDims, PalletConfig


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.scenario.pallet == PalletConfig()
    assert len(cfg.scenario.box_catalog) == 5
    assert cfg.noise.samples_per_check == 20 and cfg.noise.stable_fraction_threshold == 0.95


def test_list_and_dict_forms():
    cfg = config_from_dict({"scenario": {"box_catalog": [[4, 4, 2], {"length": 2, "width": 2, "height": 2}],
                                         "pallet": [8, 8, 8], "buffer_capacity": 1}})
    assert cfg.scenario.box_catalog == (BoxDims(4, 4, 2), BoxDims(2, 2, 2))
    assert cfg.scenario.pallet == PalletConfig(8, 8, 8)


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"scenario": {"pallet": [8, 8, 8], "extra": 1}},
    {"noise": {"std": 0.1}},
    {"scenario": {"box_catalog": [[4.5, 4, 2]]}},
    {"scenario": {"pallet": [8, 8.0, 8]}},
    {"scenario": {"episode_box_count": 0}},
    {"trainer": {"gamma": 2.0}},
    {"mask_train": {"validation_split": 0}},
])
def test_rejects_bad_configs(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_roundtrip(tmp_path):
    cfg = load_config("configs/desk.json")
    snap = config_to_dict(cfg)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(snap))
    assert config_to_dict(load_config(path)) == snap


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


@pytest.mark.parametrize("name", ["desk.json", "mask16.json"])
def test_shipped_configs_load(name):
    assert isinstance(load_config(f"configs/{name}"), RunConfig)
