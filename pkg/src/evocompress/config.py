"""
Run configuration.

One JSON file, parsed strictly: unknown keys are rejected with their dotted
path and every range is checked before any work starts. Precedence is
built-in defaults < config file < CLI flags; the worker count comes from
``--workers`` or else the ``EVOCOMPRESS_WORKERS`` environment variable.

Example
-------
::

    {
      "task": {"dataset": "two_gaussians", "format": "builtin"},
      "model": {"architecture": "mlp", "hidden": [64]},
      "training": {"epochs": 10},
      "evolution": {"population_size": 8, "max_generations": 5, "seed": 42},
      "objectives": ["quality", "size"],
      "output_dir": "runs/desk"
    }
"""

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from .datasets import BUILTIN_DATASETS, FORMATS
from .evolution import EvolutionConfig
from .exceptions import ConfigError
from .metrics import AXES, DEFAULT_AXES, PROFILES
from .network import TASK_LOSSES, Task
from .optim import OPTIMIZERS

WORKERS_ENV = "EVOCOMPRESS_WORKERS"
ARCHITECTURES = ("mlp", "tiny_resnet")


@dataclass
class TaskConfig:
    dataset: str = "two_gaussians"
    format: str = "builtin"
    kind: Optional[str] = None
    split: List[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    samples: Optional[int] = None

    def validate(self, path: str) -> None:
        formats = FORMATS + ("tabular", "builtin")
        if self.format not in formats:
            raise ConfigError(f"{path}.format must be one of {formats}, got '{self.format}'")
        if self.format == "builtin" and self.dataset not in BUILTIN_DATASETS:
            raise ConfigError(f"{path}.dataset must be one of {BUILTIN_DATASETS} for builtin data")
        if self.kind is not None and self.kind not in [t.value for t in Task]:
            raise ConfigError(f"{path}.kind must be binary, multiclass or regression")
        if len(self.split) != 3 or any(not isinstance(v, (int, float)) or v < 0 for v in self.split) \
                or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"{path}.split must be three non-negative fractions summing to 1")
        if self.samples is not None and (not isinstance(self.samples, int) or self.samples < 10):
            raise ConfigError(f"{path}.samples must be an integer >= 10")


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    hidden: List[int] = field(default_factory=lambda: [64])
    channels: int = 8

    def validate(self, path: str) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"{path}.architecture must be one of {ARCHITECTURES}")
        if any(not isinstance(h, int) or h < 1 for h in self.hidden):
            raise ConfigError(f"{path}.hidden must be a list of positive integers")
        if not isinstance(self.channels, int) or self.channels < 1:
            raise ConfigError(f"{path}.channels must be a positive integer")


@dataclass
class TrainingConfig:
    """Base model-level hyperparameters and the pretraining budget."""

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    loss: Optional[str] = None
    epochs: int = 10

    def validate(self, path: str) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"{path}.optimizer must be one of {OPTIMIZERS}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate > 0:
            raise ConfigError(f"{path}.learning_rate must be positive")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size must be a positive integer")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"{path}.epochs must be a non-negative integer")
        losses = sorted({loss for group in TASK_LOSSES.values() for loss in group})
        if self.loss is not None and self.loss not in losses:
            raise ConfigError(f"{path}.loss must be one of {losses}")


@dataclass
class MeasurementConfig:
    latency_repeats: int = 30
    latency_warmup: int = 5
    throughput_batch: int = 64
    throughput_iterations: int = 10
    timing: bool = True

    def validate(self, path: str) -> None:
        for name in ("latency_repeats", "throughput_batch", "throughput_iterations"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{path}.{name} must be a positive integer")
        if not isinstance(self.latency_warmup, int) or self.latency_warmup < 0:
            raise ConfigError(f"{path}.latency_warmup must be a non-negative integer")


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    objectives: List[str] = field(default_factory=lambda: list(DEFAULT_AXES))
    devices: List[str] = field(default_factory=lambda: ["cpu", "gpu"])
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    output_dir: str = "runs/evocompress"

    def validate(self) -> "RunConfig":
        self.task.validate("task")
        self.model.validate("model")
        self.training.validate("training")
        self.measurement.validate("measurement")
        if not self.objectives:
            raise ConfigError("objectives must name at least one axis")
        for axis in self.objectives:
            if axis not in AXES:
                raise ConfigError(f"objectives: unknown axis '{axis}' (known: {sorted(AXES)})")
        if len(set(self.objectives)) != len(self.objectives):
            raise ConfigError("objectives has duplicates")
        for device in self.devices:
            if device not in PROFILES:
                raise ConfigError(f"devices: unknown profile '{device}' (known: {sorted(PROFILES)})")
        for axis in self.objectives:
            for device in PROFILES:
                if axis.startswith(device + "_") and device not in self.devices:
                    raise ConfigError(f"objectives: axis '{axis}' needs device '{device}'")
        if any(a.endswith(("latency", "throughput")) for a in self.objectives) \
                and not self.measurement.timing:
            raise ConfigError("objectives: timing axes need measurement.timing = true")
        if not self.output_dir:
            raise ConfigError("output_dir must not be empty")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["evolution"]["operators"] = list(self.evolution.operators)
        return data


_SECTIONS = {
    "task": TaskConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evolution": EvolutionConfig,
    "measurement": MeasurementConfig,
}


def _section(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{path}.{key}'")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a :class:`RunConfig` from parsed JSON."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key in ("objectives", "devices"):
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{key} must be a list of strings")
            kwargs[key] = list(value)
        elif key == "output_dir":
            if not isinstance(value, str):
                raise ConfigError("output_dir must be a string")
            kwargs[key] = value
    return RunConfig(**kwargs).validate()


def load_config(path: str) -> RunConfig:
    """
    Read and validate a JSON run config.

    Raises
    ------
    ConfigError
        Missing file, invalid JSON (with line and column), unknown keys or
        out-of-range values.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return config_from_dict(data)


def apply_overrides(config: RunConfig, seed: Optional[int] = None,
                    generations: Optional[int] = None,
                    output_dir: Optional[str] = None) -> RunConfig:
    """CLI flags on top of the file; returns a new validated config."""
    data = config.to_dict()
    if seed is not None:
        data["evolution"]["seed"] = int(seed)
    if generations is not None:
        data["evolution"]["max_generations"] = int(generations)
    if output_dir is not None:
        data["output_dir"] = output_dir
    return config_from_dict(data)


def resolve_workers(cli_workers: Optional[int] = None) -> int:
    """``--workers`` if given, else ``EVOCOMPRESS_WORKERS``, else 1."""
    if cli_workers is not None:
        value: Any = cli_workers
        source = "--workers"
    else:
        value = os.environ.get(WORKERS_ENV, "1")
        source = WORKERS_ENV
    try:
        workers = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source} must be an integer, got '{value}'") from None
    if workers < 1:
        raise ConfigError(f"{source} must be >= 1, got {workers}")
    return workers
