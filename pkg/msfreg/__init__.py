#
# All files and artifacts in this repository are licensed under the
# provisions of the license provided by the LICENSE file in this repository.
#
#
# Run configuration loader and package errors.
#

import logging
import os
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional

import numpy as np
import torch
import yaml


class MsfRegError(Exception):
    def __init__(self, *args, **kwargs):
        self.source = args[0]
        self.location = args[1]
        self.message = args[2]
        Exception.__init__(self, *args, **kwargs)

    def __str__(self):
        return "{}: {}: {}".format(self.source, self.location, self.message)


class ConfigError(MsfRegError):
    pass


class DataError(MsfRegError):
    pass


class CheckpointError(MsfRegError):
    pass


class TrainingError(MsfRegError):
    pass


class MetricError(MsfRegError):
    pass


# Imported after the errors, the model modules raise them
from .model.constants import Normalization, OptimizerName  # noqa: E402
from .model.losses import LossWeights  # noqa: E402
from .model.network import ModelConfig  # noqa: E402
from .model.volgrid import ContractViolation  # noqa: E402

log = logging.getLogger(__name__)

SECTIONS = ("model", "loss", "optimizer", "data", "output")


@dataclass
class OptimizerConfig:
    name: str = OptimizerName.ADAM.value
    learning_rate: float = 1e-4
    iterations: int = 2000
    batch_size: int = 1
    checkpoint_every: int = 500

    def __post_init__(self):
        try:
            OptimizerName.from_str(self.name)
        except KeyError:
            raise ContractViolation(f"Unknown optimizer {self.name!r}, choose one of {list(OptimizerName.values())}")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.iterations < 1:
            raise ContractViolation(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ContractViolation(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    target_shape: List[int] = field(default_factory=lambda: [160, 224, 192])
    seed: int = 0
    normalization: str = Normalization.MINMAX.value

    def __post_init__(self):
        self.target_shape = [int(n) for n in self.target_shape]
        if len(self.target_shape) != 3 or any(n < 1 for n in self.target_shape):
            raise ContractViolation(f"target_shape must have 3 positive entries, got {self.target_shape}")
        try:
            Normalization.from_str(self.normalization)
        except KeyError:
            raise ContractViolation(f"Unknown normalization {self.normalization!r}, "
                                    f"choose one of {list(Normalization.values())}")


@dataclass
class OutputConfig:
    directory: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "optimizer": vars(self.optimizer).copy(),
            "data": vars(self.data).copy(),
            "output": vars(self.output).copy(),
        }

    @classmethod
    def from_dict(cls, values: dict, source="<config>") -> "RunConfig":
        builders = {"model": ModelConfig.from_dict, "loss": LossWeights.from_dict,
                    "optimizer": lambda v: OptimizerConfig(**v), "data": lambda v: DataConfig(**v),
                    "output": lambda v: OutputConfig(**v)}
        sections = {}
        for name in SECTIONS:
            try:
                sections[name] = builders[name](values.get(name, {}))
            except (ContractViolation, TypeError) as e:
                raise ConfigError(source, name, str(e))
        return cls(**sections)


def default_config_dict() -> dict:
    text = resources.files(__name__).joinpath("config.yaml").read_text()
    return yaml.safe_load(text)


def merge_config(defaults: dict, overrides: dict, source="<config>") -> dict:
    """Overlay overrides on the defaults, rejecting sections and keys the defaults do not have."""
    merged = {name: dict(values) for name, values in defaults.items()}
    for section, values in (overrides or {}).items():
        if section not in merged:
            raise ConfigError(source, section, f"Unknown section, expected one of {list(SECTIONS)}")
        if not isinstance(values, dict):
            raise ConfigError(source, section, "Section must be a mapping")
        for key, value in values.items():
            if key not in merged[section]:
                raise ConfigError(source, f"{section}.{key}", "Unknown key")
            merged[section][key] = value
    return merged


def load_run_config(file_name: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Load a run config, filling every missing key from the packaged defaults."""
    values = default_config_dict()
    if file_name is not None:
        try:
            with open(file_name, "r") as fp:
                user = yaml.safe_load(fp)
        except IOError as e:
            raise ConfigError(file_name, 0, f"File error: {e}")
        except yaml.YAMLError as e:
            raise ConfigError(file_name, 0, f"YAML error: {e}")
        if user is not None and not isinstance(user, dict):
            raise ConfigError(file_name, 0, "Top level must be a mapping")
        values = merge_config(values, user, file_name)
    if overrides:
        values = merge_config(values, overrides, "<command line>")
    return RunConfig.from_dict(values, file_name or "<defaults>")


def save_run_config(config: RunConfig, file_name: str):
    directory = os.path.dirname(file_name)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(file_name, "w") as fp:
        yaml.safe_dump(config.to_dict(), fp, sort_keys=False, default_flow_style=None)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def use_deterministic(enabled: bool = True):
    """Switch the training backend to deterministic kernels."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        log.debug("Deterministic algorithms enabled")
