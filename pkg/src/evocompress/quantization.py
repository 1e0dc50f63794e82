"""
Simulated quantization.

Symmetric per-tensor INT8 (range [-127, 127]) and FP16 truncation. Nothing
here runs integer kernels: quantized layers keep float weights that sit
exactly on the quantization grid, and the storage precision tag drives size
accounting and device availability.

Modes
-----
PTQ  post-training static: weights int8, input activations fake-quantized
     with ranges frozen by a calibration pass.
PDQ  post-training dynamic: weights int8, activation scale recomputed on
     every forward call.
QAT  quantization-aware training: fake-quant on weights during training with
     a straight-through gradient, int8 export at the end.
FP16 half-precision storage; available on every device profile.
"""

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .network import Network

INT8_MAX = 127

MODES = ("PTQ", "PDQ", "QAT", "FP16")

# Abbreviations used in published result tables.
MODE_ALIASES = {"QD": "PDQ", "QS": "PTQ"}

DEFAULT_CALIBRATION_BATCHES = 8


@dataclass(frozen=True)
class QuantScheme:
    """Quantization scheme. Only symmetric per-tensor schemes exist."""

    dtype: str = "INT8"
    granularity: str = "PerTensor"
    symmetric: bool = True

    def __post_init__(self):
        if self.dtype not in ("INT8", "FP16"):
            raise ValueError(f"Unsupported quantization dtype: {self.dtype}")
        if self.granularity != "PerTensor" or not self.symmetric:
            raise ValueError("Only symmetric per-tensor quantization is supported")


@dataclass
class QuantRecord:
    """
    Per-layer quantization state.

    ``scales`` holds one fp32 scale per stored tensor (INT8 modes only).
    ``activation_range`` is the calibrated (min, max) of the layer input and
    is required for PTQ.
    """

    mode: str
    dtype: str = "INT8"
    scales: Dict[str, float] = field(default_factory=dict)
    activation_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Unknown quantization mode: {self.mode}")
        for name, scale in self.scales.items():
            if not scale > 0:
                raise ValueError(f"Quantization scale for '{name}' must be positive, got {scale}")
        if self.mode == "PTQ" and self.activation_range is None:
            raise ValueError("PTQ requires calibrated activation ranges")


def quantize(t: np.ndarray, scale: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    Quantize a tensor to symmetric INT8.

    Parameters
    ----------
    t : np.ndarray
        Finite input tensor.
    scale : float, optional
        Fixed scale. When omitted, ``scale = max|t| / 127``; an all-zero
        tensor gets ``scale = 1``.

    Returns
    -------
    tuple of (np.ndarray, float)
        int8 values (round half to even, clamped to [-127, 127]) and the scale.

    Examples
    --------
    >>> q, s = quantize(np.array([-1.0, 0.5, 1.0]))
    >>> q.tolist(), s == 1 / 127
    ([-127, 64, 127], True)
    """
    t64 = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t64)):
        raise ValueError("Cannot quantize a tensor with NaN/Inf values")
    if scale is None:
        amax = float(np.max(np.abs(t64))) if t64.size else 0.0
        if amax == 0.0:
            return np.zeros(t64.shape, dtype=np.int8), 1.0
        scale = amax / INT8_MAX
        # t * 127 / amax keeps exact halves exact (0.5 -> 63.5 -> 64)
        q = np.rint(t64 * INT8_MAX / amax)
    else:
        if not scale > 0:
            raise ValueError(f"Quantization scale must be positive, got {scale}")
        q = np.rint(t64 / scale)
    q = np.clip(q, -INT8_MAX, INT8_MAX).astype(np.int8)
    return q, float(scale)


def dequantize(q: np.ndarray, scale: float, dtype=np.float64) -> np.ndarray:
    """Map int8 values back to reals: ``q * scale``."""
    return (np.asarray(q, dtype=np.float64) * scale).astype(dtype)


def fake_quantize(t: np.ndarray, scale: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quantize then dequantize, keeping the input dtype.

    Returns the fake-quantized tensor and the straight-through mask (1 where
    ``t / scale`` lies inside the clamp range, 0 outside).
    """
    q, scale = quantize(t, scale)
    ratio = np.abs(np.asarray(t, dtype=np.float64)) / scale
    ste_mask = (ratio <= INT8_MAX + 0.5).astype(t.dtype)
    return dequantize(q, scale, dtype=t.dtype), ste_mask


def storage_scale(scale: float) -> float:
    """Round a scale to the fp32 value the checkpoint stores."""
    return float(np.float32(scale))


def quantize_to_grid(t: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Snap a parameter tensor onto the int8 grid it will be exported with.

    The returned tensor equals ``q * fp32(scale)`` evaluated in float64 and
    cast to ``t.dtype``; loading the int8 payload back reproduces it bit for
    bit.
    """
    q, scale = quantize(t)
    scale32 = storage_scale(scale)
    return dequantize(q, scale32, dtype=t.dtype), scale32


def to_fp16_values(t: np.ndarray) -> np.ndarray:
    """Round to the nearest fp16-representable value, keep the input dtype."""
    return np.asarray(t).astype(np.float16).astype(t.dtype)


def activation_scale(activation_range: Tuple[float, float]) -> float:
    """Symmetric scale for a calibrated (min, max) activation range."""
    lo, hi = activation_range
    amax = max(abs(lo), abs(hi))
    return amax / INT8_MAX if amax > 0 else 1.0


def quantize_activation(x: np.ndarray, record: QuantRecord) -> np.ndarray:
    """Fake-quantize a layer input according to the layer's quantization mode."""
    if record.mode == "PTQ":
        scale = activation_scale(record.activation_range)
        clipped = np.clip(x, -INT8_MAX * scale, INT8_MAX * scale)
        return fake_quantize(clipped, scale)[0]
    if record.mode == "PDQ":
        return fake_quantize(x)[0]
    return x


def _quantize_layer_int8(layer, mode: str, activation_range=None) -> None:
    scales = {}
    for name, value in list(layer.params.items()):
        if getattr(layer, "folded", False) and name == "S":
            continue
        grid, scale32 = quantize_to_grid(value)
        layer.params[name] = grid
        scales[name] = scale32
    layer.precision = "int8"
    layer.quant = QuantRecord(mode=mode, dtype="INT8", scales=scales, activation_range=activation_range)


def calibrate(net: "Network", calib_data: np.ndarray, batch_size: int = 64,
              max_batches: int = DEFAULT_CALIBRATION_BATCHES) -> Dict[int, Tuple[float, float]]:
    """
    Record the input (min, max) of every affine layer over calibration batches.

    Parameters
    ----------
    net : Network
        Network to calibrate (not modified apart from transient flags).
    calib_data : np.ndarray
        Calibration inputs, first axis is the sample axis.
    batch_size : int, default 64
        Samples per calibration forward pass.
    max_batches : int, default 8
        Number of calibration forward passes.

    Returns
    -------
    dict
        Layer index -> (min, max) of that layer's input.
    """
    calib_data = np.asarray(calib_data)
    if calib_data.shape[0] == 0:
        raise ValueError("Calibration set is empty")
    affine = [i for i, layer in enumerate(net.layers) if layer.is_affine]
    for i in affine:
        net.layers[i].observed_range = None
        net.layers[i].calibrating = True
    try:
        for b in range(max_batches):
            start = b * batch_size
            if start >= calib_data.shape[0]:
                break
            net.forward(calib_data[start:start + batch_size].astype(net.dtype), training=False)
    finally:
        for i in affine:
            net.layers[i].calibrating = False
    return {i: net.layers[i].observed_range for i in affine}


def apply_ptq(net: "Network", calib_data: np.ndarray,
              max_batches: int = DEFAULT_CALIBRATION_BATCHES, batch_size: int = 64) -> "Network":
    """
    Post-training static quantization.

    Runs ``max_batches`` calibration forward passes on the float network,
    freezes per-layer input ranges, then quantizes the weights of every
    Linear/Conv2D layer to int8. Returns a new network; ``net`` is untouched.

    Raises
    ------
    ValueError
        If the calibration set is empty.
    """
    out = net.copy()
    _clear_quant(out)
    ranges = calibrate(out, calib_data, batch_size=batch_size, max_batches=max_batches)
    for i, layer in enumerate(out.layers):
        if layer.is_affine:
            _quantize_layer_int8(layer, "PTQ", activation_range=tuple(float(v) for v in ranges[i]))
    return out


def apply_pdq(net: "Network") -> "Network":
    """Post-training dynamic quantization: int8 weights, per-call activation scales."""
    out = net.copy()
    _clear_quant(out)
    for layer in out.layers:
        if layer.is_affine:
            _quantize_layer_int8(layer, "PDQ")
    return out


def export_qat(net: "Network") -> "Network":
    """Quantize the weights of a QAT-trained network to int8."""
    out = net.copy()
    _clear_quant(out)
    for layer in out.layers:
        if layer.is_affine:
            layer.fake_quant = False
            _quantize_layer_int8(layer, "QAT")
    return out


def qat_train(net: "Network", data, epochs: int, optimizer, loss_terms,
              early_stop_hook=None, batch_size: int = 32, rng=None):
    """
    Quantization-aware training.

    Trains with fake-quantized weights (straight-through gradients) and
    exports int8 weights at the end.

    Returns
    -------
    TrainResult
        Training result whose ``network`` is the int8-exported model.
    """
    from .training import train

    result = train(net, data, epochs=epochs, optimizer=optimizer, loss_terms=loss_terms,
                   early_stop_hook=early_stop_hook, batch_size=batch_size, rng=rng,
                   fake_quant=True)
    result.network = export_qat(result.network)
    return result


def to_fp16(net: "Network") -> "Network":
    """Truncate every stored tensor to fp16 (2 bytes per element)."""
    out = net.copy()
    _clear_quant(out)
    for layer in out.layers:
        if not layer.params and not layer.buffers:
            continue
        for name, value in layer.params.items():
            layer.params[name] = to_fp16_values(value)
        for name, value in layer.buffers.items():
            layer.buffers[name] = to_fp16_values(value)
        layer.precision = "fp16"
        layer.quant = QuantRecord(mode="FP16", dtype="FP16")
    return out


def _clear_quant(net: "Network") -> None:
    for layer in net.layers:
        layer.quant = None
        if layer.params or layer.buffers:
            layer.precision = net.base_precision


def clear_quantization(net: "Network", reason: str = "re-float", warn: bool = True) -> "Network":
    """
    Drop quantization state in place (weights keep their current values).

    Used when a float stage moves weights off the quantization grid.
    """
    if warn and any(layer.quant is not None for layer in net.layers):
        warnings.warn(f"Clearing quantization state ({reason})", stacklevel=2)
    _clear_quant(net)
    return net


def network_precision(net: "Network") -> str:
    """Return 'int8', 'fp16' or the base float precision of a network."""
    precisions = {layer.precision for layer in net.layers if layer.params}
    if "int8" in precisions:
        return "int8"
    if precisions == {"fp16"}:
        return "fp16"
    return net.base_precision


def device_available(net: "Network", supports_int8: bool) -> bool:
    """INT8 networks only run on profiles that support int8 (CPU)."""
    return supports_int8 or network_precision(net) != "int8"
