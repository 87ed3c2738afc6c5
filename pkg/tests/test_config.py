from pathlib import Path
from unittest import mock

import pytest
import yaml

from envdpo.config import (
    BackdoorConfig,
    EvalConfig,
    ExperimentConfig,
    apply_override,
    deep_merge,
    load_config_file,
    load_experiment_config,
)
from envdpo.constants import CONFIG_FILE, OUTPUT_ROOT_ENV
from envdpo.errors import ConfigError, InputError
from envdpo.world import WorldConfig


@pytest.fixture(autouse=True)
def no_output_root_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def write_yaml(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "experiment.yaml"
    path.write_text(text)
    return path


class TestLoadConfigFile:
    def test_packaged_defaults___every_section(self):
        data = load_config_file(CONFIG_FILE)
        assert set(data) == {
            "seed",
            "output_root",
            "world",
            "split",
            "train",
            "eval",
            "prop1",
            "backdoor",
        }

    def test_missing_file___fails(self, tmp_path):
        with pytest.raises(InputError):
            load_config_file(tmp_path / "absent.yaml")

    def test_unparsable___fails(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(write_yaml(tmp_path, "train: [1, 2"))

    def test_top_level_list___fails(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(write_yaml(tmp_path, "- 1\n- 2\n"))

    def test_empty___empty_mapping(self, tmp_path):
        assert load_config_file(write_yaml(tmp_path, "")) == {}


class TestMerging:
    def test_deep_merge___nested_keys_kept(self):
        base = {"train": {"beta": 2.0, "kernel": {"bandwidth": 1.0, "bandwidth_rule": "median"}}}
        merged = deep_merge(base, {"train": {"kernel": {"bandwidth": 0.5}}})
        assert merged["train"]["beta"] == 2.0
        assert merged["train"]["kernel"] == {"bandwidth": 0.5, "bandwidth_rule": "median"}
        assert base["train"]["kernel"]["bandwidth"] == 1.0

    def test_apply_override___parses_value_as_yaml(self):
        defaults = {"train": {"lambda": 1.0, "dbscan": None}}
        data = apply_override({}, defaults, "train.lambda", "0")
        apply_override(data, defaults, "train.dbscan", "{eps: 0.5, min_pts: 4}")
        assert data == {"train": {"lambda": 0, "dbscan": {"eps": 0.5, "min_pts": 4}}}

    def test_apply_override___unknown_key_fails(self):
        with pytest.raises(ConfigError, match="unknown config key 'train.lamda'"):
            apply_override({}, {"train": {"lambda": 1.0}}, "train.lamda", "0")


class TestLoadExperimentConfig:
    def test_defaults(self):
        cfg = load_experiment_config()
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.train.lam == 1.0
        assert cfg.train.dbscan is None
        assert cfg.split.shift == "popularity"
        assert cfg.eval == EvalConfig()
        assert cfg.backdoor == BackdoorConfig()
        assert cfg.output_root == Path("runs")

    def test_world_defaults___match_dataclass(self):
        cfg = load_experiment_config()
        assert cfg.world == WorldConfig()
        assert cfg.world.pop_strength == (2.0, 1.5)

    def test_scalar_pop_strength_override(self):
        cfg = load_experiment_config(overrides=[("world.pop_strength", "1.0")])
        assert cfg.world.pop_strength == (1.0, 1.0)

    def test_user_file_then_overrides(self, tmp_path):
        config_file = write_yaml(tmp_path, "train:\n  lambda: 0.5\n  epochs: 1\n")
        cfg = load_experiment_config(config_file, [("train.lambda", "0.25")])
        assert cfg.train.lam == 0.25
        assert cfg.train.epochs == 1
        assert cfg.train.beta == 2.0

    def test_unknown_key_in_file___fails(self, tmp_path):
        config_file = write_yaml(tmp_path, "train:\n  lamda: 0.5\n")
        with pytest.raises(ConfigError, match="train.lamda"):
            load_experiment_config(config_file)

    def test_section_not_a_mapping___fails(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(write_yaml(tmp_path, "train: 3\n"))

    def test_invalid_value___fails(self):
        with pytest.raises(ConfigError):
            load_experiment_config(overrides=[("train.beta", "-1")])

    def test_wrong_type___fails(self):
        with pytest.raises(ConfigError):
            load_experiment_config(overrides=[("world.env_prior", "oops")])

    def test_root_seed___feeds_unpinned_sections(self):
        cfg = load_experiment_config(overrides=[("seed", "7")])
        assert cfg.seed == 7
        assert cfg.train.seed == 7
        assert cfg.prop1.seed == 7

    def test_pinned_section_seed___kept(self):
        cfg = load_experiment_config(overrides=[("seed", "7"), ("train.seed", "3")])
        assert cfg.train.seed == 3
        assert cfg.prop1.seed == 7

    def test_output_root_from_environment(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "/tmp/elsewhere")
        assert load_experiment_config().output_root == Path("/tmp/elsewhere")

    def test_defaults_missing_sections___fail(self, tmp_path):
        with pytest.raises(ConfigError, match="lacks sections"):
            load_experiment_config(defaults_file=write_yaml(tmp_path, "seed: 0\n"))

    def test_to_dict___uses_lambda_key(self):
        data = load_experiment_config().to_dict()
        assert data["train"]["lambda"] == 1.0
        assert "lam" not in data["train"]
        assert data["output_root"] == "runs"


class TestSectionConfigs:
    def test_eval_partition___checked(self):
        with pytest.raises(ConfigError):
            EvalConfig(partition="holdout")

    def test_eval_shifted_partition___allowed(self):
        assert EvalConfig(partition="shifted_test").partition == "shifted_test"

    def test_backdoor_source___checked(self):
        with pytest.raises(ConfigError):
            BackdoorConfig(source="file")

    @mock.patch("envdpo.config.yaml.safe_load", side_effect=yaml.YAMLError("boom"))
    def test_override_parse_error___config_error(self, safe_load_mock):
        with pytest.raises(ConfigError, match="cannot parse value"):
            apply_override({}, {"seed": 0}, "seed", "x")
