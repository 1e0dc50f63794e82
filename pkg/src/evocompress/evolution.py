"""
Mutation-only multi-objective search over compression pipelines.

One generation: select parents, mutate each into one offspring, execute and
measure the offspring in a worker pool, then, at the barrier, update the
archive, adapt the operator probabilities, truncate the population, commit
stage-prefix checkpoints and persist the state. Only the orchestrator
touches the archive, the random stream and the run directory.
"""

import math
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import checkpoint_bytes, load_checkpoint_bytes
from .exceptions import ConfigError, EvoCompressError, PipelineError, RunStateError
from .metrics import (
    DEFAULT_AXES,
    MeasurementSettings,
    MetricVector,
    evaluate_network,
    failed_objectives,
    metric_vector_from_dict,
    metric_vector_to_dict,
    percent_change,
    quality_score,
    to_objectives,
)
from .network import QUALITY_METRIC, TASK_LOSSES, Network
from .pareto import (
    DEFAULT_MC_SAMPLES,
    ParetoArchive,
    hypervolume,
    hypervolume_contributions,
    reference_point,
    truncate_by_contribution,
)
from .pipeline import (
    DEFAULT_MAX_DEPTH,
    Pipeline,
    StageNode,
    execute,
    label,
    pipeline_from_dict,
    pipeline_to_dict,
    prefix_key,
    to_string,
    validate,
)
from .rng import make_rng
from .stages import MODEL_SCHEMA, STAGE_KINDS, SearchSpace, sample_params, stage_schema
from .utils import (
    STATE_NAME,
    append_history,
    cache_path,
    individual_dir,
    log_message,
    read_history,
    read_json,
    truncate_history,
    write_json,
)

ORIGINAL_LABEL = "Original"

# operator -> scope
OPERATORS = {
    "tweak_hyperparam": "local",
    "swap_stage_kind": "local",
    "change_optimizer": "global",
    "change_loss": "global",
    "insert_stage": "global",
    "delete_stage": "global",
    "reorder_stages": "global",
    "noop": "noop",
}
DEFAULT_OPERATORS = tuple(name for name, scope in OPERATORS.items() if scope != "noop")

INIT_MODES = ("pretrained", "untrained")
UNTRAINED_FIRST_STAGES = ("Tr", "Reg", "QAT")

# additive smoothing of the success rate
SUCCESS_ALPHA = 1.0
SUCCESS_BETA = 2.0

MAX_INIT_ATTEMPTS = 200
MAX_MUTATION_RETRIES = 10


@dataclass
class EvolutionConfig:
    """
    Search settings.

    At least one stopping criterion (``max_generations``,
    ``time_budget_seconds``, ``quality_threshold``) must be set.
    ``max_generations`` counts mutation generations after the initial
    population.
    """

    population_size: int = 8
    max_generations: Optional[int] = 10
    time_budget_seconds: Optional[float] = None
    quality_threshold: Optional[float] = None
    seed: int = 0
    init_mode: str = "pretrained"
    p_min: float = 0.05
    selection_random_fraction: float = 0.25
    early_stop_delta: float = 0.05
    early_stop_patience: int = 2
    early_stop_warmup: int = 3
    offspring: Optional[int] = None
    max_depth: int = DEFAULT_MAX_DEPTH
    init_max_depth: int = 3
    operators: Tuple[str, ...] = DEFAULT_OPERATORS
    hv_samples: int = DEFAULT_MC_SAMPLES
    check_invariants: bool = False

    def __post_init__(self):
        self.operators = tuple(self.operators)
        self.validate()

    @property
    def offspring_count(self) -> int:
        return int(self.offspring or self.population_size)

    def validate(self) -> None:
        if self.population_size < 2:
            raise ConfigError("evolution.population_size must be >= 2")
        if self.max_generations is None and self.time_budget_seconds is None \
                and self.quality_threshold is None:
            raise ConfigError("evolution needs at least one stopping criterion")
        if self.max_generations is not None and self.max_generations < 0:
            raise ConfigError("evolution.max_generations must be >= 0")
        if self.time_budget_seconds is not None and self.time_budget_seconds <= 0:
            raise ConfigError("evolution.time_budget_seconds must be positive")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"evolution.init_mode must be one of {INIT_MODES}")
        if not 0.0 <= self.selection_random_fraction <= 1.0:
            raise ConfigError("evolution.selection_random_fraction must be in [0, 1]")
        if not self.operators:
            raise ConfigError("evolution.operators is empty")
        unknown = [op for op in self.operators if op not in OPERATORS]
        if unknown:
            raise ConfigError(f"evolution.operators: unknown operator(s) {unknown}")
        if len(set(self.operators)) != len(self.operators):
            raise ConfigError("evolution.operators has duplicates")
        if not 0.0 <= self.p_min * len(self.operators) <= 1.0:
            raise ConfigError("evolution.p_min times the operator count must be in [0, 1]")
        if self.early_stop_patience < 1 or self.early_stop_warmup < 0:
            raise ConfigError("evolution.early_stop_patience must be >= 1 and warmup >= 0")
        if not 1 <= self.init_max_depth <= self.max_depth:
            raise ConfigError("evolution.init_max_depth must be in [1, max_depth]")
        if self.offspring is not None and self.offspring < 1:
            raise ConfigError("evolution.offspring must be >= 1")


@dataclass
class Individual:
    """
    One evaluated (or pending) pipeline.

    Individual 0 is the unmodified base model (``pipeline`` is None).
    """

    id: int
    pipeline: Optional[Pipeline]
    generation: int = 0
    parent_id: Optional[int] = None
    operator: Optional[str] = None
    status: str = "pending"
    metrics: Optional[MetricVector] = None
    objectives: Optional[Tuple[float, ...]] = None
    checkpoint: Optional[str] = None
    message: str = ""
    trace: List[dict] = field(default_factory=list)
    reused_stages: int = 0
    network: Optional[Network] = field(default=None, repr=False, compare=False)

    @property
    def is_original(self) -> bool:
        return self.pipeline is None

    @property
    def label(self) -> str:
        return ORIGINAL_LABEL if self.pipeline is None else label(self.pipeline)

    @property
    def pipeline_string(self) -> str:
        return ORIGINAL_LABEL if self.pipeline is None else to_string(self.pipeline)

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    @property
    def evaluated(self) -> bool:
        return self.status in ("ok", "partial")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "pipeline": None if self.pipeline is None else pipeline_to_dict(self.pipeline),
            "pipeline_string": self.pipeline_string,
            "label": self.label,
            "generation": self.generation,
            "parent_id": self.parent_id,
            "operator": self.operator,
            "status": self.status,
            "metrics": None if self.metrics is None else metric_vector_to_dict(self.metrics),
            "objectives": None if self.objectives is None else list(self.objectives),
            "checkpoint": self.checkpoint,
            "message": self.message,
            "trace": list(self.trace),
            "reused_stages": self.reused_stages,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Individual":
        return cls(
            id=int(data["id"]),
            pipeline=None if data.get("pipeline") is None else pipeline_from_dict(data["pipeline"]),
            generation=int(data.get("generation", 0)),
            parent_id=data.get("parent_id"),
            operator=data.get("operator"),
            status=data.get("status", "pending"),
            metrics=None if data.get("metrics") is None else metric_vector_from_dict(data["metrics"]),
            objectives=None if data.get("objectives") is None else tuple(data["objectives"]),
            checkpoint=data.get("checkpoint"),
            message=data.get("message", ""),
            trace=list(data.get("trace", [])),
            reused_stages=int(data.get("reused_stages", 0)),
        )


@dataclass
class MutationOperator:
    name: str
    scope: str
    probability: float = 0.0
    applications: int = 0
    successes: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def make_operators(names: Sequence[str] = DEFAULT_OPERATORS) -> List[MutationOperator]:
    """Operators with uniform starting probabilities."""
    return [MutationOperator(name, OPERATORS[name], probability=1.0 / len(names)) for name in names]


def adapt_probabilities(operators: List[MutationOperator], p_min: float = 0.05) -> List[MutationOperator]:
    """
    Success-rate adaptation.

    ``p ∝ (successes + 1) / (applications + 2)``, renormalized, then every
    probability is raised to ``p_min`` with the remaining mass shared
    proportionally among the others.
    """
    if not operators:
        return operators
    raw = np.array([(op.successes + SUCCESS_ALPHA) / (op.applications + SUCCESS_BETA)
                    for op in operators], dtype=np.float64)
    floored = np.zeros(len(operators), dtype=bool)
    probs = raw / raw.sum()
    for _ in range(len(operators)):
        low = (probs < p_min) & ~floored
        if not low.any():
            break
        floored |= low
        free = 1.0 - p_min * floored.sum()
        rest = raw[~floored]
        probs = np.where(floored, p_min, 0.0)
        if rest.size:
            probs[~floored] = free * rest / rest.sum()
    probs = probs / probs.sum()
    for op, p in zip(operators, probs):
        op.probability = float(p)
    return operators


# ---- sampling and mutation ----------------------------------------------------------
def sample_stage(kind: str, rng: np.random.Generator, space: Optional[SearchSpace] = None) -> StageNode:
    return StageNode(kind, sample_params(kind, rng, space))


def sample_pipeline(rng: np.random.Generator, space: Optional[SearchSpace] = None,
                    max_depth: int = 3, first_kinds: Optional[Sequence[str]] = None) -> Pipeline:
    depth = int(rng.integers(1, max_depth + 1))
    stages = []
    for i in range(depth):
        kinds = first_kinds if i == 0 and first_kinds else STAGE_KINDS
        stages.append(sample_stage(kinds[int(rng.integers(len(kinds)))], rng, space))
    return Pipeline(stages)


def init_population(config: EvolutionConfig, rng: np.random.Generator,
                    space: Optional[SearchSpace] = None) -> List[Pipeline]:
    """
    ``population_size`` distinct valid pipelines sampled from the stage registry.

    In ``untrained`` mode every pipeline starts with a training stage.

    Raises
    ------
    EvoCompressError
        When the sampler cannot find enough distinct valid pipelines.
    """
    first = UNTRAINED_FIRST_STAGES if config.init_mode == "untrained" else None
    pipelines: List[Pipeline] = []
    seen = set()
    for _ in range(MAX_INIT_ATTEMPTS * config.population_size):
        p = sample_pipeline(rng, space, config.init_max_depth, first)
        text = to_string(p)
        if text in seen or not validate(p, config.max_depth, space).ok:
            continue
        seen.add(text)
        pipelines.append(p)
        if len(pipelines) == config.population_size:
            return pipelines
    raise EvoCompressError(f"Could only sample {len(pipelines)} distinct valid pipelines "
                           f"out of {config.population_size}")


def _tunable_stages(p: Pipeline, space: Optional[SearchSpace]) -> List[int]:
    return [i for i, node in enumerate(p.stages) if stage_schema(node.kind, space)]


def _loss_choices(space: Optional[SearchSpace]) -> Tuple[str, ...]:
    return TASK_LOSSES[(space or SearchSpace()).task]


def operator_applicable(name: str, p: Pipeline, space: Optional[SearchSpace] = None,
                        max_depth: int = DEFAULT_MAX_DEPTH) -> bool:
    if name == "tweak_hyperparam":
        return bool(_tunable_stages(p, space))
    if name == "insert_stage":
        return len(p.stages) < max_depth
    if name == "delete_stage":
        return len(p.stages) > 1
    if name == "reorder_stages":
        return len({node.kind for node in p.stages}) > 1
    if name == "change_loss":
        return len(_loss_choices(space)) > 1 or any(node.kind == "Reg" for node in p.stages)
    return True


def _step_param(node: StageNode, name: str, param, rng) -> StageNode:
    current = node.resolved()[name]
    return node.with_params(**{name: param.step(current, rng)})


def apply_operator(name: str, p: Pipeline, rng: np.random.Generator,
                   space: Optional[SearchSpace] = None) -> Pipeline:
    """Apply one operator to a copy of ``p``."""
    child = p.copy()
    stages = child.stages
    if name == "noop":
        return child
    if name == "tweak_hyperparam":
        candidates = _tunable_stages(child, space)
        i = candidates[int(rng.integers(len(candidates)))]
        schema = stage_schema(stages[i].kind, space)
        keys = list(schema)
        key = keys[int(rng.integers(len(keys)))]
        stages[i] = _step_param(stages[i], key, schema[key], rng)
    elif name == "swap_stage_kind":
        i = int(rng.integers(len(stages)))
        others = [k for k in STAGE_KINDS if k != stages[i].kind]
        stages[i] = StageNode(others[int(rng.integers(len(others)))])
    elif name == "change_optimizer":
        param = MODEL_SCHEMA["optimizer"]
        current = child.model_hparams.get("optimizer", param.default)
        child.model_hparams["optimizer"] = param.step(current, rng)
    elif name == "change_loss":
        reg = [i for i, node in enumerate(stages) if node.kind == "Reg"]
        losses = _loss_choices(space)
        targets = (["loss"] if len(losses) > 1 else []) + (["regularizer"] if reg else [])
        target = targets[int(rng.integers(len(targets)))]
        if target == "loss":
            current = child.model_hparams.get("loss", losses[0])
            others = [loss for loss in losses if loss != current]
            child.model_hparams["loss"] = others[int(rng.integers(len(others)))]
        else:
            i = reg[int(rng.integers(len(reg)))]
            schema = stage_schema("Reg", space)
            keys = ["lambda_o", "lambda_h", "lai", "sparsity", "norm"]
            key = keys[int(rng.integers(len(keys)))]
            stages[i] = _step_param(stages[i], key, schema[key], rng)
    elif name == "insert_stage":
        position = int(rng.integers(len(stages) + 1))
        kind = STAGE_KINDS[int(rng.integers(len(STAGE_KINDS)))]
        stages.insert(position, sample_stage(kind, rng, space))
    elif name == "delete_stage":
        del stages[int(rng.integers(len(stages)))]
    elif name == "reorder_stages":
        i, j = (int(v) for v in rng.choice(len(stages), size=2, replace=False))
        stages[i], stages[j] = stages[j], stages[i]
    else:
        raise ValueError(f"Unknown mutation operator: {name}")
    return child


def sample_operator(operators: Sequence[MutationOperator], rng: np.random.Generator,
                    allowed: Optional[Sequence[str]] = None) -> MutationOperator:
    """Draw one operator by current probability, renormalized over ``allowed``."""
    pool = [op for op in operators if allowed is None or op.name in allowed]
    if not pool:
        raise ValueError("No applicable mutation operator")
    weights = np.array([op.probability for op in pool], dtype=np.float64)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(pool), 1.0 / len(pool))
    return pool[int(rng.choice(len(pool), p=weights))]


def mutate(parent: Pipeline, operators: Sequence[MutationOperator], rng: np.random.Generator,
           space: Optional[SearchSpace] = None, max_depth: int = DEFAULT_MAX_DEPTH,
           retries: int = MAX_MUTATION_RETRIES) -> Optional[Tuple[Pipeline, str]]:
    """
    Apply exactly one operator to a copy of ``parent``.

    Operators that cannot apply to this parent (delete on a single stage,
    insert at maximum depth) are left out of the draw. An invalid or
    unchanged result is retried with a fresh draw; after ``retries``
    attempts the mutation is given up and None is returned.
    """
    allowed = [op.name for op in operators if operator_applicable(op.name, parent, space, max_depth)]
    if not allowed:
        return None
    parent_text = to_string(parent)
    for _ in range(retries):
        op = sample_operator(operators, rng, allowed)
        child = apply_operator(op.name, parent, rng, space)
        if op.name != "noop" and to_string(child) == parent_text:
            continue
        if validate(child, max_depth, space).ok:
            return child, op.name
    return None


def select_parents(archive_ids: Sequence[int], contributions: Sequence[float],
                   population_ids: Sequence[int], k: int, random_fraction: float,
                   rng: np.random.Generator) -> List[int]:
    """
    ``ceil((1 - rho) k)`` parents from the archive, weighted by hypervolume
    contribution, and ``floor(rho k)`` uniformly from the population.

    With an empty archive every parent is drawn from the population.
    """
    if not population_ids and not archive_ids:
        raise ValueError("Cannot select parents from an empty population")
    n_archive = int(math.ceil(round((1.0 - random_fraction) * k, 9)))
    if not archive_ids:
        n_archive = 0
    n_random = k - n_archive
    parents: List[int] = []
    if n_archive:
        weights = np.asarray(contributions, dtype=np.float64)
        if weights.sum() > 0:
            picks = rng.choice(len(archive_ids), size=n_archive, p=weights / weights.sum())
        else:
            picks = rng.integers(0, len(archive_ids), n_archive)
        parents.extend(int(archive_ids[i]) for i in picks)
    if n_random:
        pool = list(population_ids) or list(archive_ids)
        parents.extend(int(pool[i]) for i in rng.integers(0, len(pool), n_random))
    return parents


def early_stop_check(scores: Sequence[float], best: Optional[float], delta: float,
                     patience: int, warmup: int = 3) -> bool:
    """
    True (abort) when the last ``patience`` epochs all scored below
    ``best - delta`` and all had index >= ``warmup`` (0-based).

    Scores are maximization-aligned. No archive (``best`` None) never aborts.
    """
    if best is None or len(scores) < patience:
        return False
    tail = range(len(scores) - patience, len(scores))
    return all(i >= warmup and scores[i] < best - delta for i in tail)


# ---- stage-prefix cache ----------------------------------------------------------------
class StageCache:
    """
    Stage-prefix checkpoints keyed by :func:`prefix_key`.

    Entries produced during a generation become visible only after
    :meth:`commit` at the barrier. Backed by ``cache/`` of a run directory,
    or by memory when there is none.
    """

    def __init__(self, run_dir: Optional[str] = None):
        self.run_dir = run_dir
        self._memory: Dict[str, bytes] = {}
        self._keys = set()
        if run_dir is not None:
            folder = os.path.join(run_dir, "cache")
            if os.path.isdir(folder):
                self._keys = {f[:-5] for f in os.listdir(folder) if f.endswith(".ptra")}

    def keys(self) -> frozenset:
        return frozenset(self._keys)

    def load(self, key: str) -> Network:
        if self.run_dir is None:
            return load_checkpoint_bytes(self._memory[key])
        with open(cache_path(self.run_dir, key), "rb") as f:
            return load_checkpoint_bytes(f.read())

    def commit(self, entries: Dict[str, bytes]) -> int:
        written = 0
        for key in sorted(entries):
            if key in self._keys:
                continue
            if self.run_dir is None:
                self._memory[key] = entries[key]
            else:
                path = cache_path(self.run_dir, key)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "wb") as f:
                    f.write(entries[key])
            self._keys.add(key)
            written += 1
        return written


def longest_cached_prefix(p: Pipeline, seed: int, keys) -> int:
    """Number of leading stages whose output is in ``keys`` (0 when none)."""
    for upto in range(len(p.stages), 0, -1):
        if prefix_key(p, upto, seed) in keys:
            return upto
    return 0


# ---- evaluation --------------------------------------------------------------------------
@dataclass
class EvaluationContext:
    """Read-only inputs shared by the workers of one generation."""

    base: Network
    data: Any
    seed: int
    cache: StageCache
    cache_keys: frozenset
    devices: Tuple[str, ...] = ("cpu", "gpu")
    settings: MeasurementSettings = field(default_factory=MeasurementSettings)
    timing: bool = True
    best_quality: Optional[float] = None
    early_stop_delta: float = 0.05
    early_stop_patience: int = 2
    early_stop_warmup: int = 3
    calib_batch_size: int = 64
    model_defaults: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Evaluation:
    status: str
    metrics: Optional[MetricVector] = None
    network: Optional[Network] = None
    snapshots: Dict[str, bytes] = field(default_factory=dict)
    trace: List[dict] = field(default_factory=list)
    message: str = ""
    reused_stages: int = 0


def evaluate_individual(ind: Individual, ctx: EvaluationContext) -> Evaluation:
    """
    Execute and measure one individual. Never raises: failures come back
    with status ``failed`` and the error message.
    """
    data = ctx.data
    if ind.pipeline is None:
        try:
            net = ctx.base.copy()
            metrics = evaluate_network(net, data.x_val, data.y_val, ctx.devices, ctx.settings,
                                       timing=ctx.timing, depth=0)
            return Evaluation("ok", metrics, net)
        except Exception as e:  # noqa: BLE001
            return Evaluation("failed", message=f"{type(e).__name__}: {e}")

    p = ind.pipeline
    snapshots: Dict[str, bytes] = {}

    def snapshot(index: int, network: Network, record) -> None:
        if record.status != "ok":
            return
        key = prefix_key(p, index + 1, ctx.seed)
        if key not in ctx.cache_keys:
            snapshots[key] = checkpoint_bytes(network)

    def hook(scores: Sequence[float]) -> bool:
        return early_stop_check(scores, ctx.best_quality, ctx.early_stop_delta,
                                ctx.early_stop_patience, ctx.early_stop_warmup)

    start = longest_cached_prefix(p, ctx.seed, ctx.cache_keys)
    try:
        start_net = ctx.cache.load(prefix_key(p, start, ctx.seed)) if start else None
        result = execute(p, ctx.base.copy(), data, seed=ctx.seed, start_index=start,
                         start_network=start_net, early_stop_hook=hook, snapshot_hook=snapshot,
                         calib_batch_size=ctx.calib_batch_size, model_defaults=ctx.model_defaults)
        metrics = evaluate_network(result.network, data.x_val, data.y_val, ctx.devices,
                                   ctx.settings, train_seconds=result.train_seconds,
                                   partial=result.stopped_early, timing=ctx.timing, depth=len(p))
    except PipelineError as e:
        return Evaluation("failed", snapshots=snapshots, message=str(e),
                          trace=[r.to_dict() for r in e.trace], reused_stages=start)
    except Exception as e:  # noqa: BLE001
        return Evaluation("failed", snapshots=snapshots, message=f"{type(e).__name__}: {e}",
                          reused_stages=start)
    return Evaluation("partial" if result.stopped_early else "ok", metrics, result.network,
                      snapshots, [r.to_dict() for r in result.trace], reused_stages=start)


# ---- orchestration -------------------------------------------------------------------------
@dataclass
class EvolutionResult:
    archive: ParetoArchive
    individuals: Dict[int, Individual]
    history: List[dict]
    reference_point: Optional[Tuple[float, ...]]
    hypervolume: float
    generation: int
    finished: bool
    stop_reason: str = ""

    @property
    def members(self) -> List[Individual]:
        return [self.individuals[i] for i in self.archive.ids]


class Evolution:
    """
    Search driver.

    Parameters
    ----------
    config : EvolutionConfig
        Search settings.
    base : Network
        Starting model of every pipeline (trained in ``pretrained`` mode).
    data : Dataset
        Train/validation data.
    run_dir : str, optional
        Run directory for checkpoints, history and resumable state. Without
        one everything stays in memory.
    axes : sequence of str
        Objective axes (see :data:`evocompress.metrics.AXES`).
    devices : sequence of str
        Measurement profiles.
    workers : int
        Evaluation threads; results do not depend on it.
    config_hash : str, optional
        Stored in the state and checked on resume.
    """

    def __init__(self, config: EvolutionConfig, base: Network, data, run_dir: Optional[str] = None,
                 axes: Sequence[str] = DEFAULT_AXES, devices: Sequence[str] = ("cpu", "gpu"),
                 settings: Optional[MeasurementSettings] = None, timing: bool = True,
                 workers: int = 1, config_hash: Optional[str] = None,
                 calib_batch_size: int = 64, model_defaults: Optional[Dict[str, Any]] = None,
                 verbose: bool = True):
        self.config = config
        self.base = base
        self.data = data
        self.run_dir = run_dir
        self.axes = tuple(axes)
        self.devices = tuple(devices)
        self.settings = settings or MeasurementSettings()
        self.timing = timing
        self.workers = max(1, int(workers))
        self.config_hash = config_hash
        self.calib_batch_size = calib_batch_size
        self.model_defaults = dict(model_defaults or {})
        self.verbose = verbose
        self.space = SearchSpace(base.task, base.has_batchnorm)
        self.cache = StageCache(run_dir)

        self.rng = make_rng(config.seed, "evolution")
        self.individuals: Dict[int, Individual] = {}
        self.archive = ParetoArchive()
        self.population: List[int] = []
        self.operators = make_operators(config.operators)
        self.history: List[dict] = []
        self.generation = -1
        self.next_id = 0
        self.elapsed = 0.0
        self.finished = False
        self.stop_reason = ""

    # ---- logging ---------------------------------------------------------------
    def _log(self, message: str, level: str = "INFO") -> None:
        if self.verbose:
            marker = {"SUCCESS": "✓", "WARNING": "⚠", "ERROR": "✗"}.get(level, " ")
            print(f"  {marker} {message}")
        if self.run_dir is not None:
            log_message(self.run_dir, message, level)

    # ---- state -------------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "generation": self.generation,
            "next_id": self.next_id,
            "elapsed_seconds": self.elapsed,
            "finished": self.finished,
            "stop_reason": self.stop_reason,
            "config_hash": self.config_hash,
            "individuals": [self.individuals[i].to_dict() for i in sorted(self.individuals)],
            "archive": self.archive.to_dict(),
            "population": list(self.population),
            "operators": [op.to_dict() for op in self.operators],
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        if self.config_hash is not None and state.get("config_hash") != self.config_hash:
            raise RunStateError("config hash mismatch: the run directory belongs to another config")
        self.generation = int(state["generation"])
        self.next_id = int(state["next_id"])
        self.elapsed = float(state.get("elapsed_seconds", 0.0))
        self.finished = bool(state.get("finished", False))
        self.stop_reason = state.get("stop_reason", "")
        self.individuals = {int(d["id"]): Individual.from_dict(d) for d in state["individuals"]}
        self.archive = ParetoArchive.from_dict(state["archive"])
        self.population = [int(i) for i in state["population"]]
        self.operators = [MutationOperator(**op) for op in state["operators"]]
        self.rng.bit_generator.state = state["rng_state"]

    def save_state(self) -> None:
        if self.run_dir is not None:
            write_json(os.path.join(self.run_dir, STATE_NAME), self.state_dict())

    def resume(self) -> bool:
        """Load ``state.json`` from the run directory; returns whether one was found."""
        if self.run_dir is None:
            return False
        state = read_json(os.path.join(self.run_dir, STATE_NAME))
        if state is None:
            return False
        self.load_state_dict(state)
        truncate_history(self.run_dir, self.generation + 1)
        self.history = read_history(self.run_dir)
        self._log(f"Resumed at generation {self.generation} with {len(self.individuals)} individuals")
        return True

    # ---- helpers ---------------------------------------------------------------------
    def _evaluated(self) -> List[Individual]:
        return [ind for i, ind in sorted(self.individuals.items()) if ind.evaluated]

    def current_reference(self) -> Optional[Tuple[float, ...]]:
        points = [ind.objectives for ind in self._evaluated()]
        return reference_point(points) if points else None

    def _best_quality(self) -> Optional[float]:
        scores = [quality_score(self.individuals[i].metrics.quality, self.individuals[i].metrics.quality_metric)
                  for i in self.archive.ids if self.individuals[i].metrics is not None]
        return max(scores) if scores else None

    def _context(self) -> EvaluationContext:
        c = self.config
        return EvaluationContext(
            base=self.base, data=self.data, seed=c.seed, cache=self.cache,
            cache_keys=self.cache.keys(), devices=self.devices, settings=self.settings,
            timing=self.timing, best_quality=self._best_quality(),
            early_stop_delta=c.early_stop_delta, early_stop_patience=c.early_stop_patience,
            early_stop_warmup=c.early_stop_warmup, calib_batch_size=self.calib_batch_size,
            model_defaults=self.model_defaults)

    def _evaluate(self, batch: List[Individual]) -> List[Evaluation]:
        ctx = self._context()
        if self.workers == 1 or len(batch) <= 1:
            return [evaluate_individual(ind, ctx) for ind in batch]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda ind: evaluate_individual(ind, ctx), batch))

    def _stopping_reason(self) -> str:
        c = self.config
        if c.max_generations is not None and self.generation >= c.max_generations:
            return f"reached {c.max_generations} generations"
        if c.time_budget_seconds is not None and self.elapsed >= c.time_budget_seconds:
            return f"time budget of {c.time_budget_seconds:g}s spent"
        if c.quality_threshold is not None:
            best = self._best_quality()
            metric = self.base_metric()
            if best is not None and best >= quality_score(c.quality_threshold, metric):
                return f"quality threshold {c.quality_threshold:g} reached"
        return ""

    def base_metric(self) -> str:
        original = self.individuals.get(0)
        if original is not None and original.metrics is not None:
            return original.metrics.quality_metric
        return QUALITY_METRIC[self.space.task]

    # ---- generations ---------------------------------------------------------------------
    def _new_individual(self, pipeline: Optional[Pipeline], generation: int,
                        parent_id: Optional[int] = None, operator: Optional[str] = None) -> Individual:
        ind = Individual(self.next_id, pipeline, generation, parent_id, operator)
        self.next_id += 1
        return ind

    def initialize(self) -> None:
        """Generation 0: the original model plus ``population_size`` sampled pipelines."""
        self._log(f"Sampling {self.config.population_size} initial pipelines "
                  f"({self.config.init_mode} mode)")
        batch = [self._new_individual(None, 0)]
        for p in init_population(self.config, self.rng, self.space):
            batch.append(self._new_individual(p, 0, parent_id=0, operator="init"))
        self._run_generation(batch, 0)

    def step(self) -> None:
        """One mutation generation."""
        g = self.generation + 1
        ref = self.current_reference()
        eligible = [i for i in self.archive.ids if not self.individuals[i].is_original]
        contributions = []
        if eligible and ref is not None:
            all_contrib = hypervolume_contributions(self.archive.points, ref, self.config.hv_samples)
            by_id = dict(zip(self.archive.ids, all_contrib))
            contributions = [by_id[i] for i in eligible]
        population = [i for i in self.population
                      if not self.individuals[i].is_original and self.individuals[i].evaluated]
        if not population and not eligible:
            population = [ind.id for ind in self._evaluated() if not ind.is_original]
        if not population and not eligible:
            raise EvoCompressError("No viable parent: every pipeline failed")
        parents = select_parents(eligible, contributions, population, self.config.offspring_count,
                                 self.config.selection_random_fraction, self.rng)
        batch = []
        for pid in parents:
            out = mutate(self.individuals[pid].pipeline, self.operators, self.rng, self.space,
                         self.config.max_depth)
            if out is None:
                self._log(f"No valid mutation of individual {pid}; skipped", "WARNING")
                continue
            child, op = out
            batch.append(self._new_individual(child, g, parent_id=pid, operator=op))
        self._run_generation(batch, g)

    def _run_generation(self, batch: List[Individual], g: int) -> None:
        started = time.perf_counter()
        self._log(f"Generation {g}: evaluating {len(batch)} individual(s) with {self.workers} worker(s)")
        results = self._evaluate(batch)
        self.elapsed += time.perf_counter() - started
        self._barrier(batch, results, g)

    def _barrier(self, batch: List[Individual], results: List[Evaluation], g: int) -> None:
        snapshots: Dict[str, bytes] = {}
        for ind, res in zip(batch, results):
            ind.status = res.status
            ind.metrics = res.metrics
            ind.message = res.message
            ind.trace = res.trace
            ind.reused_stages = res.reused_stages
            ind.network = res.network
            snapshots.update(res.snapshots)
            self.individuals[ind.id] = ind
            if ind.failed:
                self._log(f"Individual {ind.id} ({ind.pipeline_string}) failed: {ind.message}", "ERROR")

        # imputed axes follow the worst value seen so far, earlier members included
        population_metrics = [ind.metrics for ind in self._evaluated()]
        batch_ids = {ind.id for ind in batch}
        stale = False
        for ind in self._evaluated():
            objectives = to_objectives(ind.metrics, self.axes, population_metrics)
            stale |= ind.id not in batch_ids and objectives != ind.objectives
            ind.objectives = objectives
        for ind in batch:
            if not ind.evaluated:
                ind.objectives = failed_objectives(self.axes)
        if stale:
            self.archive = self._rebuild_archive(batch_ids)

        ops = {op.name: op for op in self.operators}
        entered = []
        for ind in sorted(batch, key=lambda i: i.id):
            success = ind.evaluated and self.archive.insert(ind.id, ind.objectives)
            if success:
                entered.append(ind.id)
            if ind.operator in ops:
                ops[ind.operator].applications += 1
                ops[ind.operator].successes += int(success)
        if any(op.applications for op in self.operators):
            adapt_probabilities(self.operators, self.config.p_min)
        if self.config.check_invariants:
            self.archive.check()

        ref = self.current_reference()
        candidates = sorted(set(self.archive.ids) | {ind.id for ind in batch if ind.evaluated})
        if ref is not None:
            self.population = truncate_by_contribution(
                candidates, [self.individuals[i].objectives for i in candidates],
                self.config.population_size, ref, self.config.hv_samples)
        else:
            self.population = []

        written = self.cache.commit(snapshots)
        self.generation = g
        self._persist_individuals(batch)
        hv = self.archive.hypervolume(ref, self.config.hv_samples) if ref is not None else 0.0
        record = {
            "generation": g,
            "hypervolume": hv,
            "reference_point": None if ref is None else list(ref),
            "archive_ids": self.archive.ids,
            "archive_objectives": [list(p) for p in self.archive.points],
            "archive_size": len(self.archive),
            "entered": entered,
            "evaluated": len(batch),
            "failed": sum(ind.failed for ind in batch),
            "cached_prefixes": written,
            "probabilities": {op.name: op.probability for op in self.operators},
        }
        self.history.append(record)
        if self.run_dir is not None:
            append_history(self.run_dir, record)
        self._log(f"Generation {g}: archive {len(self.archive)}, hypervolume {hv:.6g}, "
                  f"{len(entered)} new member(s)", "SUCCESS")

    def _rebuild_archive(self, exclude: set) -> ParetoArchive:
        """Archive of the evaluated individuals outside ``exclude``, inserted in id order."""
        archive = ParetoArchive()
        for ind in self._evaluated():
            if ind.id not in exclude:
                archive.insert(ind.id, ind.objectives)
        return archive

    def _persist_individuals(self, batch: List[Individual]) -> None:
        if self.run_dir is None:
            return
        original = self.individuals.get(0)
        for ind in batch:
            folder = individual_dir(self.run_dir, ind.id)
            os.makedirs(folder, exist_ok=True)
            if ind.network is not None:
                path = os.path.join(folder, "model.ptra")
                with open(path, "wb") as f:
                    f.write(checkpoint_bytes(ind.network))
                ind.checkpoint = os.path.relpath(path, self.run_dir)
                ind.network = None
            write_json(os.path.join(folder, "pipeline.json"), {
                "id": ind.id,
                "label": ind.label,
                "pipeline": ind.pipeline_string,
                "stages": None if ind.pipeline is None else pipeline_to_dict(ind.pipeline),
                "parent_id": ind.parent_id,
                "operator": ind.operator,
                "generation": ind.generation,
            })
            changes = None
            if ind.metrics is not None and original is not None and original.metrics is not None \
                    and not ind.is_original:
                changes = percent_change(original.metrics, ind.metrics)
            write_json(os.path.join(folder, "metrics.json"), {
                "status": ind.status,
                "metrics": None if ind.metrics is None else metric_vector_to_dict(ind.metrics),
                "objectives": None if ind.objectives is None else list(ind.objectives),
                "percent_change": changes,
                "reused_stages": ind.reused_stages,
                "trace": ind.trace,
                "message": ind.message,
            })

    def write_manifest(self) -> Optional[str]:
        if self.run_dir is None:
            return None
        ref = self.current_reference()
        members = []
        for i in self.archive.ids:
            ind = self.individuals[i]
            members.append({"id": i, "label": ind.label, "pipeline": ind.pipeline_string,
                            "checkpoint": ind.checkpoint, "objectives": list(ind.objectives),
                            "partial": bool(ind.metrics.partial) if ind.metrics else False})
        return write_json(os.path.join(self.run_dir, "archive", "manifest.json"), {
            "axes": list(self.axes),
            "reference_point": None if ref is None else list(ref),
            "hypervolume": self.archive.hypervolume(ref, self.config.hv_samples) if ref else 0.0,
            "members": members,
        })

    # ---- driver --------------------------------------------------------------------------------
    def run(self, stop_after: Optional[int] = None) -> EvolutionResult:
        """
        Run until a stopping criterion fires.

        ``stop_after`` interrupts the run after that generation's barrier
        (the state stays resumable).
        """
        try:
            if self.generation < 0:
                self.initialize()
                self.save_state()
            while not self.finished:
                reason = self._stopping_reason()
                if reason:
                    self.finished = True
                    self.stop_reason = reason
                    self._log(f"Stopping: {reason}", "SUCCESS")
                    self.save_state()
                    break
                if stop_after is not None and self.generation >= stop_after:
                    self._log(f"Interrupted after generation {self.generation}", "WARNING")
                    break
                self.step()
                self.save_state()
        except EvoCompressError:
            raise
        except Exception as e:
            self._log(f"Run failed: {e}\n{traceback.format_exc()}", "ERROR")
            raise
        self.write_manifest()
        ref = self.current_reference()
        return EvolutionResult(
            archive=self.archive, individuals=self.individuals, history=self.history,
            reference_point=ref,
            hypervolume=self.archive.hypervolume(ref, self.config.hv_samples) if ref else 0.0,
            generation=self.generation, finished=self.finished, stop_reason=self.stop_reason)


def history_hypervolumes(history: Sequence[dict], ref: Sequence[float],
                         mc_samples: int = DEFAULT_MC_SAMPLES) -> List[float]:
    """Archive hypervolume of every history record against one common reference point."""
    return [hypervolume([tuple(p) for p in r["archive_objectives"]], ref, mc_samples)
            if r["archive_objectives"] else 0.0 for r in history]


def run(config: EvolutionConfig, base: Network, data, **kwargs) -> EvolutionResult:
    """Functional entry point: build an :class:`Evolution` and run it."""
    return Evolution(config, base, data, **kwargs).run()
