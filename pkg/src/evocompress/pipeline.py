"""
Compression pipelines: linear chains of stages plus model-level hyperparameters.

String form::

    Pr(ratio=0.3,criterion=lamp) - Tr - PDQ | optimizer=adam,learning_rate=0.001

Stages are joined by `` - ``; explicit hyperparameters go in a parenthesized
suffix; model-level hyperparameters (H_M) follow `` | ``. A bare label such
as ``Pr - Tr - Pr - PDQ`` parses with schema defaults and prints back
unchanged. ``QD`` and ``QS`` are accepted for PDQ and PTQ and kept as
written.
"""

import copy
import hashlib
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .decomposition import RankCriterion, decompose_network
from .exceptions import EvoCompressError, PipelineError
from .metrics import compute_quality
from .network import Network, model_size_bytes
from .optim import Optimizer
from .pruning import ImportanceCriterion, PruneSpec, prune_network
from .quantization import apply_pdq, apply_ptq, clear_quantization, qat_train, to_fp16
from .regularizers import CompositeLoss
from .rng import make_rng
from .stages import (
    MODEL_SCHEMA,
    POST_TRAINING_QUANT,
    REFLOAT_STAGES,
    SearchSpace,
    check_params,
    format_value,
    model_schema,
    parse_value,
    resolve_kind,
    resolve_params,
)
from .training import train

DEFAULT_MAX_DEPTH = 6

_TOKEN = re.compile(r"^([A-Za-z0-9]+)\s*(?:\((.*)\))?$")


@dataclass
class StageNode:
    """One stage. ``hyperparams`` holds explicitly set values only."""

    kind: str
    hyperparams: Dict[str, Any] = field(default_factory=dict)
    alias: Optional[str] = None

    @property
    def label(self) -> str:
        return self.alias or self.kind

    def resolved(self) -> Dict[str, Any]:
        return resolve_params(self.kind, self.hyperparams)

    def with_params(self, **updates) -> "StageNode":
        params = dict(self.hyperparams)
        params.update(updates)
        return StageNode(self.kind, params, self.alias)


@dataclass
class Pipeline:
    stages: List[StageNode]
    model_hparams: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.stages)

    def copy(self) -> "Pipeline":
        return copy.deepcopy(self)

    def resolved_model_hparams(self, default_loss: str,
                               defaults: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Schema defaults, then run-level ``defaults``, then explicit values."""
        resolved = {name: p.default for name, p in MODEL_SCHEMA.items()}
        resolved["loss"] = default_loss
        resolved.update(defaults or {})
        resolved.update(self.model_hparams)
        return resolved


# ---- string and JSON forms -------------------------------------------------------
def _split_top_level(text: str, sep: str) -> List[str]:
    parts, depth, current = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def _format_params(params: Dict[str, Any]) -> str:
    return ",".join(f"{k}={format_value(v)}" for k, v in params.items())


def node_to_string(node: StageNode) -> str:
    if node.hyperparams:
        return f"{node.label}({_format_params(node.hyperparams)})"
    return node.label


def to_string(p: Pipeline) -> str:
    """Canonical string form; model hyperparameters appear only when set."""
    text = " - ".join(node_to_string(node) for node in p.stages)
    if p.model_hparams:
        text += " | " + _format_params(p.model_hparams)
    return text


def label(p: Pipeline) -> str:
    """Table label: stage abbreviations only."""
    return " - ".join(node.label for node in p.stages)


def _parse_params(kind: Optional[str], body: str) -> Dict[str, Any]:
    params = {}
    for item in body.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise PipelineError(f"malformed hyperparameter '{item}'")
        key, value = (s.strip() for s in item.split("=", 1))
        if kind is None:
            param = MODEL_SCHEMA.get(key)
            params[key] = param.parse(value) if param is not None else value
        else:
            params[key] = parse_value(kind, key, value)
    return params


def parse(text: str) -> Pipeline:
    """
    Parse the string form.

    Raises
    ------
    PipelineError
        ``unknown stage XX`` for an unknown abbreviation, or a malformed
        token message.
    """
    text = " ".join(text.split())
    chain, _, model_part = text.partition("|")
    stages = []
    for token in _split_top_level(chain, "-"):
        token = token.strip()
        if not token:
            raise PipelineError(f"empty stage in '{text}'")
        match = _TOKEN.match(token)
        if match is None:
            raise PipelineError(f"malformed stage '{token}'")
        name, body = match.group(1), match.group(2)
        kind = resolve_kind(name)
        params = _parse_params(kind, body) if body else {}
        stages.append(StageNode(kind, params, alias=name if name != kind else None))
    if not stages:
        raise PipelineError("empty pipeline")
    model_hparams = _parse_params(None, model_part) if model_part.strip() else {}
    return Pipeline(stages, model_hparams)


def pipeline_to_dict(p: Pipeline) -> dict:
    return {
        "stages": [{"kind": node.label, "hyperparams": dict(node.hyperparams)} for node in p.stages],
        "model_hparams": dict(p.model_hparams),
    }


def pipeline_from_dict(data: dict) -> Pipeline:
    stages = []
    for entry in data.get("stages", []):
        name = entry["kind"]
        kind = resolve_kind(name)
        stages.append(StageNode(kind, dict(entry.get("hyperparams", {})),
                                alias=name if name != kind else None))
    return Pipeline(stages, dict(data.get("model_hparams", {})))


# ---- validation ----------------------------------------------------------------------
@dataclass
class ValidationResult:
    violations: List[str] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(p: Pipeline, max_depth: int = DEFAULT_MAX_DEPTH,
             space: Optional[SearchSpace] = None) -> ValidationResult:
    """
    Check depth, hyperparameter schemas and stage-order rules.

    Never raises. Allowed-but-notable patterns go to ``flags``:
    ``re-float`` (a float or training stage after post-training
    quantization) and ``aux-only regularization`` (Reg with no LR stage).
    """
    result = ValidationResult()
    if not 1 <= len(p.stages) <= max_depth:
        result.violations.append("depth")
    quantized = False
    for i, node in enumerate(p.stages):
        for v in check_params(node.kind, node.hyperparams, space):
            result.violations.append(f"stage {i} ({node.label}): {v}")
        if node.kind in POST_TRAINING_QUANT:
            quantized = True
        elif quantized and (node.kind in REFLOAT_STAGES or node.kind == "QAT"):
            if "re-float" not in result.flags:
                result.flags.append("re-float")
    if any(n.kind == "Reg" for n in p.stages) and not any(n.kind == "LR" for n in p.stages):
        result.flags.append("aux-only regularization")
    schema = model_schema(space)
    for key, value in p.model_hparams.items():
        if key not in schema:
            result.violations.append(f"unknown model hyperparameter {key}")
        elif key == "loss" and space is None:
            continue
        elif not schema[key].check(value):
            result.violations.append(f"{key} range")
    return result


# ---- execution -------------------------------------------------------------------------
@dataclass
class StageRecord:
    index: int
    kind: str
    size_bytes: int
    quality: Optional[float]
    seconds: float
    status: str = "ok"
    train_seconds: float = 0.0
    message: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExecutionResult:
    network: Network
    trace: List[StageRecord]
    stopped_early: bool = False
    train_seconds: float = 0.0


def prefix_string(p: Pipeline, upto: int) -> str:
    return to_string(Pipeline(p.stages[:upto], p.model_hparams))


def prefix_key(p: Pipeline, upto: int, seed: int) -> str:
    """SHA-256 of the first ``upto`` stages (with H_M) and the seed."""
    text = f"{prefix_string(p, upto)}#seed={int(seed)}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def stage_rng(p: Pipeline, index: int, seed: int) -> np.random.Generator:
    """Random stream of stage ``index``; depends only on the prefix up to it."""
    return make_rng(seed, prefix_string(p, index + 1))


def _calibration_batch(data, size: int):
    return data.x_train[:size], data.y_train[:size]


def _train_stage(net: Network, node: StageNode, hm: Dict[str, Any], data, rng,
                 early_stop_hook, loss_terms: CompositeLoss, quant_aware: bool = False):
    params = node.resolved()
    optimizer = Optimizer(kind=hm["optimizer"], learning_rate=hm["learning_rate"] * params["lr_scale"])
    work = clear_quantization(net.copy(), warn=False)
    kwargs = dict(epochs=int(params["epochs"]), optimizer=optimizer, loss_terms=loss_terms,
                  early_stop_hook=early_stop_hook, batch_size=int(hm["batch_size"]), rng=rng)
    if quant_aware:
        return qat_train(work, data, **kwargs)
    return train(work, data, **kwargs)


def apply_stage(net: Network, node: StageNode, hm: Dict[str, Any], data, rng: np.random.Generator,
                early_stop_hook: Optional[Callable] = None, calib_batch_size: int = 64):
    """
    Apply one stage.

    Returns
    -------
    tuple of (Network, float, bool)
        Output network, training seconds and the stopped-early flag.
    """
    params = node.resolved()
    kind = node.kind
    if net.loss != hm["loss"]:
        net = net.copy()
        net.loss = hm["loss"]
    if kind == "Tr":
        result = _train_stage(net, node, hm, data, rng, early_stop_hook, CompositeLoss(hm["loss"]))
        return result.network, result.seconds, result.stopped_early
    if kind == "Reg":
        terms = CompositeLoss(hm["loss"], lambda_o=params["lambda_o"], lambda_h=params["lambda_h"],
                              lai=params["lai"], sparsity=params["sparsity"], norm=params["norm"])
        result = _train_stage(net, node, hm, data, rng, early_stop_hook, terms)
        return result.network, result.seconds, result.stopped_early
    if kind == "QAT":
        result = _train_stage(net, node, hm, data, rng, early_stop_hook, CompositeLoss(hm["loss"]),
                              quant_aware=True)
        return result.network, result.seconds, result.stopped_early
    if kind == "LR":
        out = decompose_network(clear_quantization(net.copy(), warn=False),
                                RankCriterion(params["criterion"], params["threshold"]))
        return out, 0.0, False
    if kind == "Pr":
        spec = PruneSpec(params["ratio"], ImportanceCriterion(params["criterion"], params["scope"]),
                         structured=bool(params["structured"]))
        out, _ = prune_network(net, spec, _calibration_batch(data, calib_batch_size),
                               compact_after=bool(params["compact"]))
        return out, 0.0, False
    if kind == "PTQ":
        return apply_ptq(net, data.x_train, max_batches=int(params["calib_batches"]),
                         batch_size=calib_batch_size), 0.0, False
    if kind == "PDQ":
        return apply_pdq(net), 0.0, False
    if kind == "FP16":
        return to_fp16(net), 0.0, False
    raise PipelineError(f"unknown stage {kind}")


def execute(p: Pipeline, net: Network, data, seed: int = 0, start_index: int = 0,
            start_network: Optional[Network] = None, early_stop_hook: Optional[Callable] = None,
            snapshot_hook: Optional[Callable[[int, Network, StageRecord], None]] = None,
            calib_batch_size: int = 64,
            model_defaults: Optional[Dict[str, Any]] = None) -> ExecutionResult:
    """
    Apply the stages of ``p`` to ``net`` left to right.

    Parameters
    ----------
    p : Pipeline
        Pipeline to run; assumed valid.
    net : Network
        Base model (not modified).
    data : Dataset
        Training, validation and calibration data.
    seed : int
        Run seed; stage streams come from :func:`stage_rng`.
    start_index, start_network :
        Resume after a cached prefix: ``start_network`` is the output of
        stage ``start_index - 1``.
    early_stop_hook : callable, optional
        Forwarded to training stages.
    snapshot_hook : callable, optional
        Called with ``(index, network, record)`` after every stage.
    model_defaults : dict, optional
        Run-level model hyperparameters used where the pipeline sets none.

    Raises
    ------
    PipelineError
        When a stage fails; carries the stage index and the trace so far,
        the failing stage included.
    """
    if start_index > 0 and start_network is None:
        raise ValueError("start_network is required when start_index > 0")
    current = start_network if start_index > 0 else net
    hm = p.resolved_model_hparams(net.loss, model_defaults)
    trace: List[StageRecord] = []
    stopped_early = False
    train_seconds = 0.0
    for index in range(start_index, len(p.stages)):
        node = p.stages[index]
        started = time.perf_counter()
        try:
            current, seconds, stopped = apply_stage(
                current, node, hm, data, stage_rng(p, index, seed),
                early_stop_hook=early_stop_hook, calib_batch_size=calib_batch_size)
            quality = compute_quality(current, data.x_val, data.y_val)
        except (EvoCompressError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            trace.append(StageRecord(index, node.label, model_size_bytes(current), None,
                                     time.perf_counter() - started, status="failed",
                                     message=str(e)))
            raise PipelineError(f"stage {index} ({node.label}) failed: {e}", stage_index=index,
                                trace=trace) from e
        train_seconds += seconds
        record = StageRecord(index, node.label, model_size_bytes(current), quality,
                             time.perf_counter() - started,
                             status="stopped-early" if stopped else "ok", train_seconds=seconds)
        trace.append(record)
        if snapshot_hook is not None:
            snapshot_hook(index, current, record)
        if stopped:
            stopped_early = True
            break
    return ExecutionResult(current, trace, stopped_early, train_seconds)
