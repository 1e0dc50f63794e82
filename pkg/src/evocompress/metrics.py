"""
Quality, cost and structure metrics and their objective-space form.

Raw metrics live in a :class:`MetricVector`. Unavailable device measurements
(int8 networks on the GPU profile) are ``None`` and render as ``∞`` in
reports. :func:`to_objectives` turns raw metrics into a maximization vector.
"""

import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .network import QUALITY_METRIC, Network, Task, model_size_bytes
from .quantization import device_available

# Serializes timing so that no two measurements share the host.
MEASUREMENT_TOKEN = threading.Lock()

IMPUTE_EPS = 1e-6
IMPUTE_FALLBACK = -1e6
FAILED_OBJECTIVE = -1e12

# axis -> (MetricVector attribute, maximize?)
AXES = {
    "quality": ("quality", True),
    "cpu_latency": ("cpu_latency_ms", False),
    "gpu_latency": ("gpu_latency_ms", False),
    "cpu_throughput": ("cpu_throughput_ips", True),
    "gpu_throughput": ("gpu_throughput_ips", True),
    "size": ("size_mb", False),
    "depth": ("depth", False),
    "train_seconds": ("train_seconds", False),
}

DEFAULT_AXES = ("quality", "size")

# Report columns that carry percent changes.
REPORT_AXES = ("quality", "cpu_latency", "gpu_latency", "cpu_throughput", "gpu_throughput", "size")


@dataclass(frozen=True)
class DeviceProfile:
    """
    Named measurement profile.

    The ``gpu`` profile runs on the host CPU; it times one large batched call
    for throughput and rejects int8 networks.
    """

    name: str
    supports_int8: bool
    batch_parallel: bool


PROFILES = {
    "cpu": DeviceProfile("cpu", supports_int8=True, batch_parallel=False),
    "gpu": DeviceProfile("gpu", supports_int8=False, batch_parallel=True),
}


@dataclass
class MeasurementSettings:
    latency_repeats: int = 30
    latency_warmup: int = 5
    throughput_batch: int = 64
    throughput_iterations: int = 10


@dataclass
class MetricVector:
    quality: float
    quality_metric: str
    size_mb: float
    depth: int
    train_seconds: float = 0.0
    cpu_latency_ms: Optional[float] = None
    gpu_latency_ms: Optional[float] = None
    cpu_throughput_ips: Optional[float] = None
    gpu_throughput_ips: Optional[float] = None
    size_bytes: int = 0
    partial: bool = False
    availability: Dict[str, bool] = field(default_factory=dict)

    def value(self, axis: str) -> Optional[float]:
        return getattr(self, AXES[axis][0])

    def available(self, axis: str) -> bool:
        value = self.value(axis)
        return value is not None and math.isfinite(value)


def metric_vector_to_dict(m: MetricVector) -> dict:
    out = asdict(m)
    out["availability"] = {axis: m.available(axis) for axis in AXES}
    return out


def metric_vector_from_dict(data: dict) -> MetricVector:
    fields = dict(data)
    fields.pop("percent_change", None)
    return MetricVector(**fields)


# ---- quality metrics ---------------------------------------------------------
def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve via the rank-sum (Mann-Whitney) form.

    Ties count one half. Raises ``ValueError("degenerate labels")`` when only
    one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.size == 0 or scores.size != labels.size:
        raise ValueError("roc_auc needs equally sized, non-empty scores and labels")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate labels")
    ranks = rankdata(scores)
    return float((np.sum(ranks[labels == 1]) - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def f1_macro(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Unweighted mean of per-class F1; classes absent from both inputs are skipped."""
    preds = np.asarray(preds).reshape(-1).astype(int)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if preds.size == 0 or preds.size != labels.size:
        raise ValueError("f1_macro needs equally sized, non-empty inputs")
    scores = []
    for c in np.union1d(preds, labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.size == 0 or preds.size != targets.size:
        raise ValueError("rmse needs equally sized, non-empty inputs")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def compute_quality(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    """Task metric of ``net`` on ``(x, y)``: ROC-AUC, F1-macro or RMSE."""
    out = net.predict(x).astype(np.float64)
    if net.task == Task.BINARY:
        return roc_auc(expit(out[:, 0]), y)
    if net.task == Task.MULTICLASS:
        return f1_macro(np.argmax(out, axis=1), y)
    return rmse(out[:, 0], y)


def quality_score(value: float, metric: str) -> float:
    """Maximization-aligned quality (RMSE is negated)."""
    return -value if metric == "rmse" else value


# ---- timing --------------------------------------------------------------------
def _timing_input(net: Network, batch: int) -> np.ndarray:
    rng = np.random.default_rng(0)
    return rng.standard_normal((batch,) + net.input_shape).astype(net.dtype)


def measure_latency(net: Network, profile: DeviceProfile, batch: int = 1,
                    repeats: int = 30, warmup: int = 5) -> Optional[float]:
    """Median wall time in ms of ``repeats`` forwards after ``warmup``; ``None`` if unavailable."""
    if not device_available(net, profile.supports_int8):
        return None
    x = _timing_input(net, batch)
    times = []
    with MEASUREMENT_TOKEN:
        for _ in range(warmup):
            net.forward(x)
        for _ in range(repeats):
            start = time.perf_counter()
            net.forward(x)
            times.append(time.perf_counter() - start)
    net.clear_caches()
    return max(float(np.median(times)) * 1000.0, 1e-6)


def measure_throughput(net: Network, profile: DeviceProfile, batch: int = 64,
                       iterations: int = 10) -> Optional[float]:
    """Items per second over ``iterations`` forwards of ``batch`` items; ``None`` if unavailable."""
    if not device_available(net, profile.supports_int8):
        return None
    items = batch * iterations
    with MEASUREMENT_TOKEN:
        if profile.batch_parallel:
            x = _timing_input(net, items)
            net.forward(x[:1])
            start = time.perf_counter()
            net.forward(x)
            elapsed = time.perf_counter() - start
        else:
            x = _timing_input(net, batch)
            net.forward(x)
            start = time.perf_counter()
            for _ in range(iterations):
                net.forward(x)
            elapsed = time.perf_counter() - start
    net.clear_caches()
    return items / max(elapsed, 1e-9)


def evaluate_network(net: Network, x_val: np.ndarray, y_val: np.ndarray,
                     devices: Sequence[str] = ("cpu", "gpu"),
                     settings: Optional[MeasurementSettings] = None,
                     train_seconds: float = 0.0, partial: bool = False,
                     timing: bool = True, depth: Optional[int] = None) -> MetricVector:
    """
    Measure every metric of an exported network.

    Size is the exported size (S folded into U for float decomposed
    layers) in MB (10**6 bytes). ``depth`` defaults to the number of
    Linear/Conv2D layers; the search passes the pipeline depth instead.
    """
    from .decomposition import fold_factors

    settings = settings or MeasurementSettings()
    exported = fold_factors(net)
    size_bytes = model_size_bytes(exported)
    metric = QUALITY_METRIC[net.task]
    m = MetricVector(
        quality=compute_quality(net, x_val, y_val),
        quality_metric=metric,
        size_mb=size_bytes / 1e6,
        size_bytes=size_bytes,
        depth=net.depth if depth is None else int(depth),
        train_seconds=float(train_seconds),
        partial=partial,
    )
    if timing:
        for name in devices:
            profile = PROFILES[name]
            setattr(m, f"{name}_latency_ms", measure_latency(
                net, profile, repeats=settings.latency_repeats, warmup=settings.latency_warmup))
            setattr(m, f"{name}_throughput_ips", measure_throughput(
                net, profile, batch=settings.throughput_batch,
                iterations=settings.throughput_iterations))
    m.availability = {axis: m.available(axis) for axis in AXES}
    return m


# ---- objective space -------------------------------------------------------------
def axis_objective(m: MetricVector, axis: str) -> Optional[float]:
    """Maximization-aligned value of one axis, ``None`` when unavailable."""
    if not m.available(axis):
        return None
    value = float(m.value(axis))
    if axis == "quality":
        return quality_score(value, m.quality_metric)
    return value if AXES[axis][1] else -value


def to_objectives(m: MetricVector, axes: Sequence[str],
                  population: Sequence[MetricVector] = (), eps: float = IMPUTE_EPS) -> tuple:
    """
    Objective vector of ``m`` over ``axes`` (all maximization).

    Unavailable axes get the worst available value of that axis in
    ``population`` minus ``eps`` (``-1e6`` when nobody has one).

    Examples
    --------
    quality 0.9 and 10 MB on axes (quality, size) give (0.9, -10.0).
    """
    if not axes:
        raise ValueError("Objective axis set is empty")
    out = []
    for axis in axes:
        if axis not in AXES:
            raise ValueError(f"Unknown objective axis: {axis}")
        value = axis_objective(m, axis)
        if value is None:
            others = [v for v in (axis_objective(p, axis) for p in population) if v is not None]
            value = (min(others) if others else IMPUTE_FALLBACK) - eps
        out.append(value)
    return tuple(out)


def failed_objectives(axes: Sequence[str]) -> tuple:
    return tuple(FAILED_OBJECTIVE for _ in axes)


def percent_change(original: MetricVector, candidate: MetricVector,
                   axes: Sequence[str] = REPORT_AXES) -> Dict[str, Optional[float]]:
    """``100 * (candidate - original) / original`` per axis; ``None`` when not computable."""
    out: Dict[str, Optional[float]] = {}
    for axis in axes:
        if not (original.available(axis) and candidate.available(axis)):
            out[axis] = None
            continue
        base = float(original.value(axis))
        if base == 0:
            out[axis] = None
            continue
        out[axis] = 100.0 * (float(candidate.value(axis)) - base) / base
    return out


def format_percent(value: Optional[float]) -> str:
    """Render a percent change with one decimal and explicit sign; ``∞`` when missing."""
    if value is None:
        return "∞"
    rounded = round(value, 1)
    if rounded == 0:
        rounded = 0.0
    return f"{rounded:+.1f}%"
