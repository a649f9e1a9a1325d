import json

import pytest

from src.config import (
    CONFIGS_DIR,
    SENSING_GRID,
    ExperimentConfig,
    derive_seed,
    dump_experiment_config,
    load_experiment_config,
    parse_experiment_config,
)
from src.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.array.n_bs == 32
    assert cfg.dataset.candidate_oversampling == 4
    assert cfg.selection.m_grid == list(SENSING_GRID)
    assert cfg.timing.t_predict_ms is None


@pytest.mark.parametrize("name", ["smoke.json", "default.json"])
def test_shipped_configs_load(name):
    cfg = load_experiment_config(CONFIGS_DIR / name)
    assert cfg.schema_version == 1
    assert cfg.measurement.feature_scale == "linear"


class TestValidation:
    def test_unknown_key_names_its_pointer(self):
        with pytest.raises(ConfigError) as info:
            parse_experiment_config({"train": {"epochs": 3, "momentum": 0.9}})
        assert info.value.pointer == "/train/momentum"

    def test_out_of_range_value(self):
        with pytest.raises(ConfigError) as info:
            parse_experiment_config({"train": {"epochs": 0}})
        assert info.value.pointer == "/train/epochs"
        assert str(info.value).startswith("/train/epochs: ")

    def test_wide_beams_must_divide_the_array(self):
        with pytest.raises(ConfigError):
            parse_experiment_config({"eval": {"n_wide": 5}})

    def test_sensing_grid_must_fit(self):
        with pytest.raises(ConfigError):
            parse_experiment_config({"selection": {"m_grid": [4, 64]}})

    def test_split_fractions_sum_to_one(self):
        with pytest.raises(ConfigError):
            parse_experiment_config({"dataset": {"split_fractions": [0.5, 0.1, 0.1]}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_experiment_config(path)


def test_dump_round_trip(tmp_path):
    cfg = parse_experiment_config({"seed": 5, "dknn": {"k": 7}})
    path = dump_experiment_config(cfg, tmp_path / "resolved.json")
    assert load_experiment_config(path) == cfg
    assert json.loads(path.read_text())["dknn"]["k"] == 7


class TestSeeds:
    def test_deterministic(self):
        assert derive_seed(7, "scene") == derive_seed(7, "scene")

    def test_streams_differ(self):
        seeds = {derive_seed(7, name) for name in ("scene", "twin", "noise", "init", "lsh")}
        assert len(seeds) == 5
        assert derive_seed(7, "scene") != derive_seed(8, "scene")

    def test_config_seed_for(self):
        assert ExperimentConfig(seed=3).seed_for("shap") == derive_seed(3, "shap")


def test_section_payload():
    payload = ExperimentConfig().section_payload("timing", "dknn")
    assert set(payload) == {"timing", "dknn"}
    assert payload["timing"]["t_frame_ms"] == 10.0
