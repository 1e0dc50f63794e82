"""
Tests for int8 and fp16 quantization.
"""

import numpy as np
import pytest

from evocompress.layers import Linear
from evocompress.metrics import PROFILES, measure_latency, measure_throughput
from evocompress.network import Network, build_mlp, model_size_bytes
from evocompress.optim import Optimizer
from evocompress.quantization import (
    QuantRecord,
    QuantScheme,
    activation_scale,
    apply_pdq,
    apply_ptq,
    clear_quantization,
    dequantize,
    device_available,
    fake_quantize,
    network_precision,
    qat_train,
    quantize,
    quantize_to_grid,
    to_fp16,
)
from evocompress.rng import make_rng


def test_quantize_example():
    """Test quantization of (-1, 0.5, 1)."""
    q, scale = quantize(np.array([-1.0, 0.5, 1.0]))

    assert q.dtype == np.int8
    assert q.tolist() == [-127, 64, 127]
    assert scale == 1 / 127


def test_quantize_zeros():
    """Test that an all-zero tensor gets scale 1."""
    q, scale = quantize(np.zeros(4))
    assert q.tolist() == [0, 0, 0, 0]
    assert scale == 1.0


def test_quantize_rejects_nan():
    """Test that NaN tensors cannot be quantized."""
    with pytest.raises(ValueError):
        quantize(np.array([1.0, np.nan]))


def test_round_trip_error_bound():
    """Test |dequantize(quantize(t)) - t| <= scale / 2."""
    t = make_rng(0, "q").standard_normal(1000) * 3
    q, scale = quantize(t)

    assert np.max(np.abs(dequantize(q, scale) - t)) <= scale / 2 + 1e-12


def test_grid_values_are_fixed_points():
    """Test that fake-quantizing a tensor already on the grid leaves it unchanged."""
    grid, _ = quantize_to_grid(make_rng(1, "g").standard_normal(50))
    again, ste = fake_quantize(grid)

    assert np.allclose(again, grid, rtol=1e-12, atol=0)
    assert np.all(ste == 1)


def test_pdq_size_is_quarter():
    """Test that dynamic quantization stores about a quarter of the fp32 bytes."""
    net = Network([Linear(100, 100)], "regression", 100, "mse", (100,))
    q = apply_pdq(net)

    assert model_size_bytes(q) == 10108
    assert model_size_bytes(q) / model_size_bytes(net) == pytest.approx(0.25, abs=0.001)
    assert network_precision(q) == "int8"
    assert network_precision(net) == "fp32"


def test_fp16_halves_size_and_bounds_error():
    """Test fp16 truncation: half the bytes, relative error <= 2^-11."""
    net = build_mlp(8, [16], 1, "binary", "bce", make_rng(2, "fp16"))
    half = to_fp16(net)

    assert model_size_bytes(half) == model_size_bytes(net) // 2
    for (_, _, a), (_, _, b) in zip(net.parameters(), half.parameters()):
        nonzero = np.abs(a) >= 2.0 ** -14
        rel = np.abs(b[nonzero] - a[nonzero]) / np.abs(a[nonzero])
        assert np.all(rel <= 2.0 ** -11)


def test_fp16_exact_values():
    """Test that fp16-representable values survive unchanged."""
    layer = Linear(2, 1, dtype=np.float32)
    layer.params["weight"] = np.array([[0.5, -0.25]], dtype=np.float32)
    net = Network([layer], "binary", 1, "bce", (2,))

    assert to_fp16(net).layers[0].params["weight"].tolist() == [[0.5, -0.25]]


def test_ptq_identity_error_bounded():
    """Test PTQ on an identity layer: error within the activation scale."""
    layer = Linear(4, 4, dtype=np.float64)
    layer.params["weight"] = np.eye(4)
    net = Network([layer], "multiclass", 4, "ce", (4,), dtype=np.float64)
    x = make_rng(3, "ptq").uniform(-1, 1, (64, 4))

    q = apply_ptq(net, x)
    record = q.layers[0].quant
    scale = activation_scale(record.activation_range)

    assert record.mode == "PTQ"
    assert np.max(np.abs(q.forward(x) - x)) <= scale


def test_ptq_requires_calibration_data(mlp):
    """Test that an empty calibration set is rejected."""
    with pytest.raises(ValueError):
        apply_ptq(mlp, np.zeros((0, 8)))


def test_ptq_record_needs_range():
    """Test that a PTQ record without activation range is invalid."""
    with pytest.raises(ValueError):
        QuantRecord(mode="PTQ")
    with pytest.raises(ValueError):
        QuantRecord(mode="PDQ", scales={"weight": 0.0})


def test_pdq_keeps_predictions_close(mlp):
    """Test that dynamic quantization barely moves the outputs."""
    x = make_rng(4, "x").standard_normal((16, 8)).astype(np.float32)
    q = apply_pdq(mlp)

    assert np.max(np.abs(q.forward(x) - mlp.forward(x))) < 0.1


def test_qat_exports_int8(mlp, gaussians):
    """Test that QAT trains with fake quantization and exports int8 weights."""
    result = qat_train(mlp, gaussians, 2, Optimizer("adam", 1e-3), None, rng=make_rng(5, "qat"))
    out = result.network

    assert network_precision(out) == "int8"
    assert all(not layer.fake_quant for _, layer in out.affine_layers)
    assert all(layer.quant.mode == "QAT" for _, layer in out.affine_layers)


def test_clear_quantization_warns(mlp):
    """Test that re-floating a quantized network warns and resets precision."""
    q = apply_pdq(mlp)
    with pytest.warns(UserWarning, match="re-float"):
        clear_quantization(q)

    assert network_precision(q) == "fp32"


def test_int8_unavailable_on_gpu_profile(mlp):
    """Test that int8 networks are not measurable on the gpu profile."""
    q = apply_pdq(mlp)

    assert not device_available(q, PROFILES["gpu"].supports_int8)
    assert device_available(q, PROFILES["cpu"].supports_int8)
    assert measure_latency(q, PROFILES["gpu"], repeats=2, warmup=0) is None
    assert measure_throughput(q, PROFILES["gpu"], batch=4, iterations=2) is None
    assert measure_latency(to_fp16(mlp), PROFILES["gpu"], repeats=2, warmup=0) > 0


def test_quant_scheme_is_symmetric_per_tensor():
    """Test the supported quantization schemes."""
    assert QuantScheme() == QuantScheme("INT8", "PerTensor", True)
    assert QuantScheme("FP16").dtype == "FP16"

    with pytest.raises(ValueError):
        QuantScheme("INT4")
    with pytest.raises(ValueError):
        QuantScheme(symmetric=False)
    with pytest.raises(ValueError):
        QuantScheme(granularity="PerChannel")
