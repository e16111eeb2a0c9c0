"""Run configuration: YAML file, environment defaults and command-line overrides."""

from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional
import copy
import os
import pathlib

import yaml
from dotenv import load_dotenv

from .errors import ConfigError
from .imaging import AugmentConfig, PreprocessConfig
from .model import ModelConfig
from .training import AdamConfig, FocalLossConfig, TrainConfig
from .utils import logger

ENV_CONFIG = "LIGHTTBNET_CONFIG"
ENV_SEED = "LIGHTTBNET_SEED"
ENV_OUTPUT_DIR = "LIGHTTBNET_OUTPUT_DIR"

SECTIONS = ("model", "preprocess", "augment", "focal", "adam", "train")
TOP_LEVEL = ("manifest", "split", "output_dir", "checkpoint_dir", "seed", "test_frac", "threshold")


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs; nested configs validate on `validate()`."""
    manifest: Optional[str] = None
    split: Optional[str] = None
    output_dir: str = "runs/default"
    checkpoint_dir: Optional[str] = None
    seed: int = 0
    test_frac: float = 0.2
    threshold: float = 0.5
    model: ModelConfig = ModelConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentConfig = AugmentConfig()
    focal: FocalLossConfig = FocalLossConfig()
    adam: AdamConfig = AdamConfig()
    epochs: int = 100
    batch_size: int = 16
    workers: int = 0
    fold_workers: int = 0

    @property
    def checkpoints(self) -> pathlib.Path:
        return pathlib.Path(self.checkpoint_dir) if self.checkpoint_dir else pathlib.Path(self.output_dir) / "checkpoints"

    @property
    def split_path(self) -> pathlib.Path:
        return pathlib.Path(self.split) if self.split else pathlib.Path(self.output_dir) / "split.csv"

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, workers=self.workers,
                           augment=self.augment, focal=self.focal, adam=self.adam)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.preprocess.validate()
        if self.model.input_size != self.preprocess.image_size:
            raise ConfigError(f"model.input_size {self.model.input_size} differs from "
                              f"preprocess.image_size {self.preprocess.image_size}")
        if not 0.0 <= self.test_frac < 1.0:
            raise ConfigError(f"test_frac must be in [0,1), got {self.test_frac}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0,1], got {self.threshold}")
        if self.fold_workers < 0:
            raise ConfigError(f"fold_workers must be >= 0, got {self.fold_workers}")
        self.train_config().validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "manifest": self.manifest, "split": self.split, "output_dir": self.output_dir,
            "checkpoint_dir": self.checkpoint_dir, "seed": self.seed, "test_frac": self.test_frac,
            "threshold": self.threshold,
            "model": self.model.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "augment": self.augment.to_dict(),
            "focal": {"gamma": self.focal.gamma},
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "train": {"epochs": self.epochs, "batch_size": self.batch_size, "workers": self.workers,
                      "fold_workers": self.fold_workers},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build from the YAML tree; unknown keys are rejected."""
        data = dict(data or {})
        unknown = set(data) - set(TOP_LEVEL) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            preprocess = PreprocessConfig.from_dict(_section(data, "preprocess"))
            model_data = dict(_section(data, "model"))
            model_data.setdefault("input_size", preprocess.image_size)
            model = ModelConfig.from_dict(model_data)
            train = _section(data, "train")
            extra = set(train) - {"epochs", "batch_size", "workers", "fold_workers"}
            if extra:
                raise ConfigError(f"unknown train keys: {sorted(extra)}")
            top = {k: data[k] for k in TOP_LEVEL if data.get(k) is not None}
            return cls(
                model=model, preprocess=preprocess,
                augment=AugmentConfig(**_section(data, "augment")),
                focal=FocalLossConfig(**_section(data, "focal")),
                adam=AdamConfig(**_section(data, "adam")),
                **{k: int(v) for k, v in train.items()},
                **top,
            )
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}")


def _section(data: Mapping[str, Any], name: str) -> Dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return dict(value)


def load_yaml(path: os.PathLike) -> Dict[str, Any]:
    path = pathlib.Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}", {"path": str(path)})
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}", {"path": str(path)})
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at top level", {"path": str(path)})
    return data


def env_defaults(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Defaults taken from LIGHTTBNET_SEED and LIGHTTBNET_OUTPUT_DIR."""
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    if environ.get(ENV_SEED):
        try:
            values["seed"] = int(environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got '{environ[ENV_SEED]}'")
    if environ.get(ENV_OUTPUT_DIR):
        values["output_dir"] = environ[ENV_OUTPUT_DIR]
    return values


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def overrides_tree(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn {"train.epochs": 5, "seed": 1} into a nested tree, skipping None values."""
    tree: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def resolve_run_config(path: Optional[os.PathLike] = None, overrides: Optional[Mapping[str, Any]] = None,
                       environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Effective configuration: built-in defaults < environment < config file < overrides.

    Args:
        path: YAML config file; falls back to LIGHTTBNET_CONFIG when None
        overrides: Dotted keys from command-line flags; None values are ignored
        environ: Environment mapping (os.environ after loading .env)

    Returns:
        A validated RunConfig
    """
    if environ is None:
        load_dotenv()
        environ = os.environ
    tree = env_defaults(environ)
    path = path or environ.get(ENV_CONFIG) or None
    if path:
        _merge(tree, load_yaml(path))
        logger.info(f"Loaded run config {path}")
    _merge(tree, overrides_tree(overrides or {}))
    config = RunConfig.from_dict(tree).validate()
    logger.debug(f"Effective run config: {config.to_dict()}")
    return config


def dump_yaml(config: RunConfig, path: os.PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return path
