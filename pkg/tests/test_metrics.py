"""
Tests for quality metrics, measurements and the objective-space mapping.
"""

import numpy as np
import pytest

from evocompress.metrics import (
    IMPUTE_EPS,
    MeasurementSettings,
    MetricVector,
    evaluate_network,
    f1_macro,
    format_percent,
    metric_vector_from_dict,
    metric_vector_to_dict,
    percent_change,
    rmse,
    roc_auc,
    to_objectives,
)
from evocompress.quantization import apply_pdq

FAST = MeasurementSettings(latency_repeats=2, latency_warmup=0, throughput_batch=4,
                           throughput_iterations=2)


def _vector(**kwargs):
    fields = dict(quality=0.9, quality_metric="roc_auc", size_mb=10.0, depth=1)
    fields.update(kwargs)
    return MetricVector(**fields)


def test_roc_auc_example():
    """Test AUC of a ranking with one swapped pair."""
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_roc_auc_perfect_and_ties():
    """Test a perfect ranking and all-tied scores."""
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_roc_auc_degenerate_labels():
    """Test that a single-class label set is rejected."""
    with pytest.raises(ValueError, match="degenerate labels"):
        roc_auc([0.1, 0.2], [1, 1])


def test_f1_macro():
    """Test macro F1 on a three-class example."""
    assert f1_macro([0, 1, 1, 2], [0, 1, 2, 2]) == pytest.approx(7 / 9)
    assert f1_macro([1, 0, 2], [1, 0, 2]) == 1.0


def test_rmse():
    """Test RMSE on equal and shifted inputs."""
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 2.0], [3.0, 2.0]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        rmse([], [])


def test_objectives_are_maximization_aligned():
    """Test the objective vector of quality and size."""
    assert to_objectives(_vector(), ("quality", "size")) == (0.9, -10.0)
    assert to_objectives(_vector(quality=3.4, quality_metric="rmse"), ("quality",)) == (-3.4,)


def test_unavailable_axis_is_imputed():
    """Test imputation of a missing GPU latency from the population."""
    missing = _vector()
    measured = _vector(gpu_latency_ms=5.0)
    faster = _vector(gpu_latency_ms=2.0)

    objectives = to_objectives(missing, ("gpu_latency",), population=[measured, faster])

    assert objectives == (-5.0 - IMPUTE_EPS,)


def test_unknown_axis():
    """Test that unknown objective axes are rejected."""
    with pytest.raises(ValueError):
        to_objectives(_vector(), ("accuracy",))


def test_percent_change_examples():
    """Test percent changes and their rendering."""
    original = _vector(quality=0.770, size_mb=18.646)
    candidate = _vector(quality=0.756, size_mb=14.003)
    changes = percent_change(original, candidate)

    assert format_percent(changes["quality"]) == "-1.8%"
    assert format_percent(changes["size"]) == "-24.9%"
    assert format_percent(percent_change(original, original)["size"]) == "+0.0%"
    assert changes["gpu_latency"] is None
    assert format_percent(None) == "∞"
    assert format_percent(-0.04) == "+0.0%"


def test_metric_vector_dict_round_trip():
    """Test that metric vectors survive their JSON form."""
    m = _vector(cpu_latency_ms=1.5, partial=True)
    m.availability = {"quality": True}
    again = metric_vector_from_dict(metric_vector_to_dict(m))

    assert again.cpu_latency_ms == 1.5
    assert again.partial
    assert again.availability["cpu_latency"] is True
    assert again.availability["gpu_latency"] is False


def test_evaluate_network(mlp, gaussians):
    """Test measurement of a float network on both profiles."""
    m = evaluate_network(mlp, gaussians.x_val, gaussians.y_val, settings=FAST, depth=2)

    assert m.quality_metric == "roc_auc"
    assert 0.0 <= m.quality <= 1.0
    assert m.size_bytes == (8 * 16 + 16 + 16 + 1) * 4
    assert m.size_mb == m.size_bytes / 1e6
    assert m.depth == 2
    assert m.cpu_latency_ms > 0 and m.gpu_latency_ms > 0
    assert m.cpu_throughput_ips > 0 and m.gpu_throughput_ips > 0


def test_evaluate_int8_network(mlp, gaussians):
    """Test that an int8 network has no GPU measurements."""
    m = evaluate_network(apply_pdq(mlp), gaussians.x_val, gaussians.y_val, settings=FAST)

    assert m.gpu_latency_ms is None and m.gpu_throughput_ips is None
    assert m.cpu_latency_ms is not None
    assert m.availability["gpu_latency"] is False
    assert m.depth == 2


def test_evaluate_without_timing(mlp, gaussians):
    """Test that timing can be skipped."""
    m = evaluate_network(mlp, gaussians.x_val, gaussians.y_val, timing=False)
    assert m.cpu_latency_ms is None
    assert not m.available("cpu_latency")
