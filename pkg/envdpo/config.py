"""
Experiment configuration: package defaults, a user file, then dotted overrides.
"""
import copy
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from envdpo.causal import AmplificationConfig
from envdpo.constants import CONFIG_FILE, OUTPUT_ROOT_ENV
from envdpo.errors import ConfigError, EnvdpoError, InputError
from envdpo.evalrec import PARTITIONS, SplitSpec
from envdpo.trainer import TrainConfig
from envdpo.utils import PathLike
from envdpo.world import WorldConfig

SECTIONS = ("seed", "output_root", "world", "split", "train", "eval", "prop1", "backdoor")
EVAL_PARTITIONS = PARTITIONS + ("shifted_test",)
BACKDOOR_SOURCES = ("world", "random")
SEEDED_SECTIONS = ("train", "prop1")


@dataclass
class EvalConfig:
    ks: Tuple[int, ...] = (10, 20)
    groups: int = 5
    time_buckets: int = 4
    partition: str = "ood_test"
    backdoor: bool = False

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be a non-empty list of positive cutoffs")
        if self.groups < 1 or self.time_buckets < 1:
            raise ConfigError("eval.groups and eval.time_buckets must be positive")
        if self.partition not in EVAL_PARTITIONS:
            raise ConfigError(f"eval.partition must be one of {EVAL_PARTITIONS}")


@dataclass
class BackdoorConfig:
    source: str = "random"
    n_env: int = 3
    n_x: int = 4
    n_y: int = 5
    n_samples: int = 100_000
    exact_tolerance: float = 1e-12
    sampled_tolerance: float = 0.02

    def __post_init__(self):
        if self.source not in BACKDOOR_SOURCES:
            raise ConfigError(f"backdoor.source must be one of {BACKDOOR_SOURCES}")
        if min(self.n_env, self.n_x, self.n_y, self.n_samples) < 1:
            raise ConfigError("backdoor table sizes and n_samples must be positive")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_root: Path = Path("runs")
    world: WorldConfig = field(default_factory=WorldConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    prop1: AmplificationConfig = field(default_factory=AmplificationConfig)
    backdoor: BackdoorConfig = field(default_factory=BackdoorConfig)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["output_root"] = str(self.output_root)
        data["train"] = self.train.to_dict()
        return data


def load_config_file(path: PathLike = CONFIG_FILE) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file {path} does not exist")
    with open(path, "r") as config_file_fh:
        try:
            data = yaml.safe_load(config_file_fh)
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return data


def _check_known(data: Dict[str, Any], defaults: Dict[str, Any], prefix: str = "") -> None:
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' must be a mapping")
            _check_known(value, defaults[key], f"{dotted}.")


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(data: Dict[str, Any], defaults: Dict[str, Any], key: str, raw: str):
    """Set `a.b.c` from the YAML-parsed string `raw`."""
    parts = key.split(".")
    node, known = data, defaults
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if not isinstance(known, dict) or part not in known:
            raise ConfigError(f"unknown config key '{key}'")
        if last:
            try:
                node[part] = yaml.safe_load(raw)
            except yaml.YAMLError as err:
                raise ConfigError(f"cannot parse value for '{key}': {err}") from err
        else:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node, known = node[part], known[part]
    return data


def _seed_sections(data: Dict[str, Any], explicit: Dict[str, Any]) -> None:
    # the root seed feeds sections that do not pin their own
    for section in SEEDED_SECTIONS:
        if "seed" not in explicit.get(section, {}):
            data[section]["seed"] = data["seed"]


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            seed=int(data["seed"]),
            output_root=Path(data["output_root"]),
            world=WorldConfig(**data["world"]),
            split=SplitSpec(**data["split"]),
            train=TrainConfig.from_dict(data["train"]),
            eval=EvalConfig(**data["eval"]),
            prop1=AmplificationConfig(**data["prop1"]),
            backdoor=BackdoorConfig(**data["backdoor"]),
        )
    except EnvdpoError:
        raise
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"invalid configuration: {err}") from err


def load_experiment_config(
    config_file: Optional[PathLike] = None,
    overrides: Iterable[Tuple[str, str]] = (),
    defaults_file: PathLike = CONFIG_FILE,
) -> ExperimentConfig:
    """Defaults, deep-merged user file, dotted overrides, then validation."""
    defaults = load_config_file(defaults_file)
    missing = [s for s in SECTIONS if s not in defaults]
    if missing:
        raise ConfigError(f"default config lacks sections {missing}")

    explicit: Dict[str, Any] = {}
    if config_file is not None:
        explicit = load_config_file(config_file)
        _check_known(explicit, defaults)
    for key, raw in overrides:
        apply_override(explicit, defaults, key, raw)

    data = deep_merge(defaults, explicit)
    if os.environ.get(OUTPUT_ROOT_ENV):
        data["output_root"] = os.environ[OUTPUT_ROOT_ENV]
    _seed_sections(data, explicit)
    return build_config(data)
