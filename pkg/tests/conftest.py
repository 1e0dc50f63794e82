"""
Shared fixtures for the evocompress test suite.
"""

import os

import numpy as np
import pytest

from evocompress.datasets import builtin_dataset, dataset_from_arrays, make_two_gaussians
from evocompress.network import build_mlp, build_tiny_resnet
from evocompress.rng import make_rng


def finite_difference(f, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        plus = f()
        array[idx] = old - h
        minus = f()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture
def fd_grad():
    return finite_difference


@pytest.fixture
def rel_err():
    return relative_error


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def gaussians():
    """Small two-Gaussian binary dataset (zscore, 70/15/15)."""
    return builtin_dataset("two_gaussians", seed=3, n=200)


@pytest.fixture
def separable_gaussians():
    """Two-Gaussian data with a wide margin."""
    x, y = make_two_gaussians(n=600, separation=6.0, seed=11)
    return dataset_from_arrays(x, y, "binary", seed=11)


@pytest.fixture
def mlp(rng):
    """float32 MLP 8 -> 16 -> 1 for the binary task."""
    return build_mlp(8, [16], 1, "binary", "bce", rng)


@pytest.fixture
def mlp64(rng):
    """float64 MLP for gradient checks."""
    return build_mlp(4, [5], 3, "multiclass", "ce", rng, dtype=np.float64)


@pytest.fixture
def resnet64(rng):
    """float64 tiny residual network on 1x6x6 inputs."""
    return build_tiny_resnet((1, 6, 6), 3, 4, "multiclass", "ce", rng, dtype=np.float64)


def _write_member(run_dir, individual_id, label, metrics):
    from evocompress.metrics import metric_vector_to_dict
    from evocompress.utils import individual_dir, write_json

    folder = individual_dir(run_dir, individual_id)
    write_json(os.path.join(folder, "pipeline.json"), {"id": individual_id, "label": label})
    write_json(os.path.join(folder, "metrics.json"),
               {"status": "ok", "metrics": metric_vector_to_dict(metrics)})


@pytest.fixture
def synthetic_run(tmp_path):
    """Run directory with an original and two archive members, no search involved."""
    from evocompress.metrics import MetricVector
    from evocompress.utils import setup_run_directory, write_json

    run_dir = setup_run_directory(str(tmp_path / "run"))
    original = MetricVector(0.770, "roc_auc", 18.646, 2, cpu_latency_ms=2.0, gpu_latency_ms=1.0,
                            cpu_throughput_ips=500.0, gpu_throughput_ips=900.0)
    pruned = MetricVector(0.756, "roc_auc", 14.003, 2, cpu_latency_ms=1.5, gpu_latency_ms=1.0,
                          cpu_throughput_ips=600.0, gpu_throughput_ips=900.0)
    quantized = MetricVector(0.751, "roc_auc", 4.662, 1, cpu_latency_ms=1.2,
                             cpu_throughput_ips=700.0)
    _write_member(run_dir, 0, "Original", original)
    _write_member(run_dir, 3, "Pr - Tr", pruned)
    _write_member(run_dir, 5, "PDQ", quantized)
    write_json(os.path.join(run_dir, "archive", "manifest.json"), {
        "axes": ["quality", "size"],
        "members": [
            {"id": 5, "label": "PDQ", "pipeline": "PDQ", "objectives": [0.751, -4.662]},
            {"id": 0, "label": "Original", "pipeline": "Original", "objectives": [0.770, -18.646]},
            {"id": 3, "label": "Pr - Tr", "pipeline": "Pr - Tr", "objectives": [0.756, -14.003]},
        ],
    })
    return run_dir
