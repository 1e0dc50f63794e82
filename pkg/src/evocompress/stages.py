"""
Stage kinds and hyperparameter schemas.

Single registry read by pipeline parsing, validation, sampling and the
local mutation operators.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import PipelineError
from .network import TASK_LOSSES, Task
from .optim import OPTIMIZERS
from .pruning import CRITERIA
from .decomposition import RANK_CRITERIA
from .quantization import MODE_ALIASES

# Stage abbreviations as they appear in result tables
STAGE_NAMES = {
    "Reg": "Regularized Training",
    "LR": "Low-Rank Decomposition",
    "Tr": "Non-Regularized Training",
    "Pr": "Pruning",
    "QAT": "Quantization-Aware Training",
    "PDQ": "Post-training Dynamic Quantization",
    "PTQ": "Post-training Static Quantization",
    "FP16": "FP16 Conversion",
}

STAGE_KINDS = tuple(STAGE_NAMES)

TRAINING_STAGES = ("Reg", "Tr", "QAT")
POST_TRAINING_QUANT = ("PTQ", "PDQ", "FP16")
QUANT_STAGES = ("QAT",) + POST_TRAINING_QUANT
# float stages that move weights off a quantization grid
REFLOAT_STAGES = ("Reg", "Tr", "LR")

STAGE_ALIASES = dict(MODE_ALIASES)


@dataclass(frozen=True)
class FloatParam:
    low: float
    high: float
    default: float
    log: bool = False

    def check(self, value) -> bool:
        return (isinstance(value, (int, float)) and not isinstance(value, bool)
                and math.isfinite(value) and self.low <= value <= self.high)

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            value = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        else:
            value = rng.uniform(self.low, self.high)
        return self._round(value)

    def step(self, value: float, rng: np.random.Generator) -> float:
        """Log-uniform multiplicative step within the range."""
        for _ in range(10):
            new = self._round(value * math.exp(rng.uniform(-math.log(2.0), math.log(2.0))))
            if new != value:
                return new
        return self.sample(rng)

    def _round(self, value: float) -> float:
        value = float(f"{value:.4g}")
        return min(max(value, self.low), self.high)

    def parse(self, text: str) -> float:
        return float(text)


@dataclass(frozen=True)
class IntParam:
    low: int
    high: int
    default: int

    def check(self, value) -> bool:
        return isinstance(value, (int, np.integer)) and not isinstance(value, bool) \
            and self.low <= value <= self.high

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))

    def step(self, value: int, rng: np.random.Generator) -> int:
        """Adjacent step, reflected at the range ends."""
        options = [v for v in (value - 1, value + 1) if self.low <= v <= self.high]
        if not options:
            return value
        return int(options[int(rng.integers(len(options)))])

    def parse(self, text: str) -> int:
        return int(text)


@dataclass(frozen=True)
class ChoiceParam:
    choices: Tuple[Any, ...]
    default: Any
    ordinal: bool = False

    def check(self, value) -> bool:
        return any(value == c and type(value) is type(c) or _same_number(value, c)
                   for c in self.choices)

    def sample(self, rng: np.random.Generator):
        return self.choices[int(rng.integers(len(self.choices)))]

    def step(self, value, rng: np.random.Generator):
        """Adjacent step for ordinal choices, uniform over the others otherwise."""
        idx = self._index(value)
        if self.ordinal and idx is not None:
            options = [i for i in (idx - 1, idx + 1) if 0 <= i < len(self.choices)]
        else:
            options = [i for i in range(len(self.choices)) if i != idx]
        if not options:
            return value
        return self.choices[options[int(rng.integers(len(options)))]]

    def _index(self, value) -> Optional[int]:
        for i, c in enumerate(self.choices):
            if value == c:
                return i
        return None

    def parse(self, text: str):
        for c in self.choices:
            if isinstance(c, bool):
                if text.lower() == str(c).lower():
                    return c
            elif isinstance(c, (int, float)):
                try:
                    if float(text) == c:
                        return c
                except ValueError:
                    continue
            elif text == c:
                return c
        return text


def _same_number(a, b) -> bool:
    numeric = (int, float, np.integer, np.floating)
    if isinstance(a, bool) or isinstance(b, bool):
        return False
    return isinstance(a, numeric) and isinstance(b, numeric) and a == b


_BOOL = ChoiceParam((False, True), False)
_EPOCHS = IntParam(1, 10, 3)
_LR_SCALE = FloatParam(0.1, 3.0, 1.0, log=True)
_AUX_WEIGHT = ChoiceParam((0.0, 1e-4, 1e-3, 1e-2), 0.0, ordinal=True)

STAGE_SCHEMAS: Dict[str, Dict[str, Any]] = {
    "Reg": {
        "epochs": _EPOCHS,
        "lr_scale": _LR_SCALE,
        "lambda_o": FloatParam(1e-4, 1.0, 1e-2, log=True),
        "lambda_h": FloatParam(1e-4, 1.0, 1e-2, log=True),
        "lai": _AUX_WEIGHT,
        "sparsity": _AUX_WEIGHT,
        "norm": _AUX_WEIGHT,
    },
    "Tr": {"epochs": _EPOCHS, "lr_scale": _LR_SCALE},
    "LR": {
        "criterion": ChoiceParam(RANK_CRITERIA, "energy"),
        "threshold": FloatParam(0.05, 1.0, 0.9),
    },
    "Pr": {
        "ratio": FloatParam(0.01, 0.95, 0.3),
        "criterion": ChoiceParam(CRITERIA, "magnitude"),
        "scope": ChoiceParam(("layer", "global"), "layer"),
        "structured": _BOOL,
        "compact": _BOOL,
    },
    "QAT": {"epochs": IntParam(1, 10, 2), "lr_scale": _LR_SCALE},
    "PTQ": {"calib_batches": IntParam(1, 16, 8)},
    "PDQ": {},
    "FP16": {},
}

MODEL_SCHEMA: Dict[str, Any] = {
    "optimizer": ChoiceParam(OPTIMIZERS, "adam"),
    "learning_rate": FloatParam(1e-4, 1e-1, 1e-3, log=True),
    "batch_size": ChoiceParam((16, 32, 64, 128), 32, ordinal=True),
}


@dataclass(frozen=True)
class SearchSpace:
    """Context that narrows the registry for one model: task losses and BN availability."""

    task: Task = Task.BINARY
    has_batchnorm: bool = False

    def loss_param(self) -> ChoiceParam:
        losses = TASK_LOSSES[Task(self.task)]
        return ChoiceParam(losses, losses[0])


def resolve_kind(token: str) -> str:
    """Canonical stage kind of an abbreviation (aliases included)."""
    token = token.strip()
    if token in STAGE_SCHEMAS:
        return token
    if token in STAGE_ALIASES:
        return STAGE_ALIASES[token]
    raise PipelineError(f"unknown stage {token}")


def stage_schema(kind: str, space: Optional[SearchSpace] = None) -> Dict[str, Any]:
    schema = dict(STAGE_SCHEMAS[resolve_kind(kind)])
    if kind == "Pr" and space is not None and not space.has_batchnorm:
        criterion = schema["criterion"]
        schema["criterion"] = ChoiceParam(tuple(c for c in criterion.choices if c != "bn_scale"),
                                          criterion.default)
    return schema


def model_schema(space: Optional[SearchSpace] = None) -> Dict[str, Any]:
    schema = dict(MODEL_SCHEMA)
    schema["loss"] = (space or SearchSpace()).loss_param()
    return schema


def resolve_params(kind: str, params: Dict[str, Any]) -> Dict[str, Any]:
    """Schema defaults overlaid with the explicit ``params``."""
    schema = STAGE_SCHEMAS[resolve_kind(kind)]
    resolved = {name: p.default for name, p in schema.items()}
    resolved.update(params)
    return resolved


def check_params(kind: str, params: Dict[str, Any], space: Optional[SearchSpace] = None) -> List[str]:
    """Violation messages for unknown keys and out-of-range values."""
    schema = stage_schema(kind, space)
    violations = []
    for name, value in params.items():
        if name not in schema:
            violations.append(f"unknown hyperparameter {name} for {kind}")
        elif not schema[name].check(value):
            violations.append(f"{name} range")
    return violations


def sample_params(kind: str, rng: np.random.Generator,
                  space: Optional[SearchSpace] = None) -> Dict[str, Any]:
    return {name: p.sample(rng) for name, p in stage_schema(kind, space).items()}


def parse_value(kind: str, name: str, text: str):
    schema = STAGE_SCHEMAS[resolve_kind(kind)]
    if name not in schema:
        return _guess_value(text)
    try:
        return schema[name].parse(text)
    except ValueError:
        return _guess_value(text)


def _guess_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
