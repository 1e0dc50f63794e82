"""
Layer zoo for the numpy engine.

Every layer keeps its stored tensors in ``params`` (trainable) and
``buffers`` (stored, not trainable), optional binary ``masks`` keyed by
parameter name, a quantization record and a storage precision tag.

Linear and Conv2D share :class:`AffineLayer`. A decomposed affine layer
replaces ``weight`` by factors ``U`` (out x r), ``S`` (r,) and ``V``
(fan_in x r) and computes ``((x @ V) * S) @ U.T + bias``.
"""

from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .quantization import fake_quantize, quantize_activation

PRECISION_BYTES = {"fp64": 8, "fp32": 4, "fp16": 2, "int8": 1}


class Layer:
    """Base class. Subclasses implement ``forward`` and ``backward``."""

    kind = "Layer"
    is_affine = False

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.masks: Dict[str, np.ndarray] = {}
        self.quant = None
        self.precision = "fp32"
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(input_shape)

    def config(self) -> dict:
        """Constructor arguments, stored in the checkpoint ``meta`` chunk."""
        return {}

    def masked(self, name: str) -> np.ndarray:
        value = self.params[name]
        mask = self.masks.get(name)
        return value if mask is None else value * mask

    def clear_cache(self) -> None:
        self._cache = None

    def stored_elements(self) -> int:
        return sum(int(v.size) for v in self.params.values()) + sum(
            int(v.size) for v in self.buffers.values()
        )

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self.params.items())
        return f"{self.kind}({shapes})"


class AffineLayer(Layer):
    """Shared machinery of Linear and Conv2D: masks, fake-quant, factors."""

    is_affine = True

    def __init__(self):
        super().__init__()
        self.fake_quant = False
        self.folded = False
        self.calibrating = False
        self.observed_range: Optional[Tuple[float, float]] = None

    # ---- structure -------------------------------------------------------
    @property
    def is_decomposed(self) -> bool:
        return "U" in self.params

    @property
    def rank(self) -> int:
        return int(self.params["U"].shape[1]) if self.is_decomposed else 0

    @property
    def out_features(self) -> int:
        if self.is_decomposed:
            return int(self.params["U"].shape[0])
        return int(self.params["weight"].shape[0])

    @property
    def fan_in(self) -> int:
        if self.is_decomposed:
            return int(self.params["V"].shape[0])
        return int(np.prod(self.params["weight"].shape[1:]))

    @property
    def prunable(self) -> Tuple[str, ...]:
        return ("U", "V") if self.is_decomposed else ("weight",)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        raise NotImplementedError

    def weight_matrix(self) -> np.ndarray:
        """Dense (out, fan_in) matrix of the effective weight."""
        if self.is_decomposed:
            U, S, V = self.masked("U"), self.params["S"], self.masked("V")
            return (U * S) @ V.T
        return self.masked("weight").reshape(self.out_features, -1)

    # ---- forward/backward on im2col rows ---------------------------------
    def _effective(self, name: str):
        value = self.masked(name)
        if self.fake_quant and not (self.folded and name == "S"):
            value, ste = fake_quantize(value)
            return value, ste
        return value, None

    def _quantize_input(self, x: np.ndarray, training: bool) -> np.ndarray:
        if self.calibrating:
            lo, hi = float(np.min(x)), float(np.max(x))
            if self.observed_range is None:
                self.observed_range = (lo, hi)
            else:
                self.observed_range = (min(lo, self.observed_range[0]),
                                       max(hi, self.observed_range[1]))
        if self.quant is not None and not training:
            return quantize_activation(x, self.quant)
        return x

    def _rows_forward(self, cols: np.ndarray) -> np.ndarray:
        cache = {"cols": cols}
        if self.is_decomposed:
            U, U_ste = self._effective("U")
            S, S_ste = self._effective("S")
            V, V_ste = self._effective("V")
            z1 = cols @ V
            z2 = z1 * S
            out = z2 @ U.T
            cache.update(U=U, S=S, V=V, z1=z1, z2=z2, ste={"U": U_ste, "S": S_ste, "V": V_ste})
        else:
            W, W_ste = self._effective("weight")
            W2 = W.reshape(self.out_features, -1)
            out = cols @ W2.T
            cache.update(W2=W2, ste={"weight": W_ste})
        if "bias" in self.params:
            b, b_ste = self._effective("bias")
            out = out + b
            cache["ste"]["bias"] = b_ste
        self._cache = cache
        return out

    def _rows_backward(self, g: np.ndarray) -> np.ndarray:
        c = self._cache
        if c is None:
            raise RuntimeError(f"{self.kind}.backward called without a forward cache")
        grads = {}
        cols = c["cols"]
        if self.is_decomposed:
            grads["U"] = g.T @ c["z2"]
            dz2 = g @ c["U"]
            grads["S"] = np.sum(dz2 * c["z1"], axis=0)
            dz1 = dz2 * c["S"]
            grads["V"] = cols.T @ dz1
            dcols = dz1 @ c["V"].T
        else:
            dW2 = g.T @ cols
            grads["weight"] = dW2.reshape(self.params["weight"].shape)
            dcols = g @ c["W2"]
        if "bias" in self.params:
            grads["bias"] = np.sum(g, axis=0)
        for name, value in grads.items():
            ste = c["ste"].get(name)
            if ste is not None:
                value = value * ste
            mask = self.masks.get(name)
            if mask is not None:
                value = value * mask
            self.grads[name] = value.astype(self.params[name].dtype, copy=False)
        return dcols

    # ---- channel surgery used by structured pruning ----------------------
    def drop_outputs(self, keep: np.ndarray) -> None:
        """Keep only the output channels listed in ``keep``."""
        names = ["U"] if self.is_decomposed else ["weight"]
        if "bias" in self.params:
            names.append("bias")
        for name in names:
            self.params[name] = np.ascontiguousarray(self.params[name][keep])
            if name in self.masks:
                self.masks[name] = np.ascontiguousarray(self.masks[name][keep])
        self._resize_outputs(len(keep))

    def drop_inputs(self, keep_cols: np.ndarray, new_in: int) -> None:
        """Keep only the fan-in columns ``keep_cols``; ``new_in`` is the new input size."""
        if self.is_decomposed:
            self.params["V"] = np.ascontiguousarray(self.params["V"][keep_cols])
            if "V" in self.masks:
                self.masks["V"] = np.ascontiguousarray(self.masks["V"][keep_cols])
        else:
            w = self.params["weight"]
            w2 = w.reshape(w.shape[0], -1)[:, keep_cols]
            self.params["weight"] = np.ascontiguousarray(w2.reshape(self._weight_shape_for_inputs(new_in)))
            if "weight" in self.masks:
                m2 = self.masks["weight"].reshape(w.shape[0], -1)[:, keep_cols]
                self.masks["weight"] = np.ascontiguousarray(m2.reshape(self.params["weight"].shape))
        self._resize_inputs(new_in)

    def _resize_outputs(self, n: int) -> None:
        raise NotImplementedError

    def _resize_inputs(self, n: int) -> None:
        raise NotImplementedError

    def _weight_shape_for_inputs(self, n: int) -> Tuple[int, ...]:
        raise NotImplementedError


class Linear(AffineLayer):
    """Fully connected layer, weight shape (out, in)."""

    kind = "Linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self._out = int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / self.in_features)
        self.params["weight"] = rng.uniform(-bound, bound, (self._out, self.in_features)).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(self._out, dtype=dtype)

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features)

    def config(self) -> dict:
        return {"in_features": self.in_features, "out_features": self.out_features,
                "bias": "bias" in self.params}

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (N, {self.in_features}) input, got {x.shape}")
        x = self._quantize_input(x, training)
        return self._rows_forward(x)

    def backward(self, grad):
        return self._rows_backward(grad)

    def output_shape(self, input_shape):
        return (self.out_features,)

    def _resize_outputs(self, n):
        self._out = n

    def _resize_inputs(self, n):
        self.in_features = n

    def _weight_shape_for_inputs(self, n):
        return (self.out_features, n)


class Conv2D(AffineLayer):
    """Stride-1 2-D convolution with zero padding, weight shape (out, in, kh, kw)."""

    kind = "Conv2D"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: Optional[int] = None, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.in_channels = int(in_channels)
        self._out = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.padding = self.kernel_size // 2 if padding is None else int(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel_size ** 2
        bound = np.sqrt(6.0 / fan_in)
        shape = (self._out, self.in_channels, self.kernel_size, self.kernel_size)
        self.params["weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(self._out, dtype=dtype)

    @property
    def out_channels(self) -> int:
        return self.out_features

    @property
    def weight_shape(self):
        k = self.kernel_size
        return (self.out_features, self.in_channels, k, k)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_features,
                "kernel_size": self.kernel_size, "padding": self.padding,
                "bias": "bias" in self.params}

    def _out_hw(self, h: int, w: int) -> Tuple[int, int]:
        k, p = self.kernel_size, self.padding
        return h + 2 * p - k + 1, w + 2 * p - k + 1

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2D expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        x = self._quantize_input(x, training)
        n, c, h, w = x.shape
        k, p = self.kernel_size, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        oh, ow = self._out_hw(h, w)
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        out = self._rows_forward(cols)
        self._cache["geometry"] = (n, c, h, w, oh, ow)
        return out.reshape(n, oh, ow, self.out_features).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, c, h, w, oh, ow = self._cache["geometry"]
        k, p = self.kernel_size, self.padding
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_features)
        dcols = self._rows_backward(g2).reshape(n, oh, ow, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:p + h, p:p + w]
        return dxp

    def output_shape(self, input_shape):
        _, h, w = input_shape
        oh, ow = self._out_hw(h, w)
        return (self.out_features, oh, ow)

    def _resize_outputs(self, n):
        self._out = n

    def _resize_inputs(self, n):
        self.in_channels = n

    def _weight_shape_for_inputs(self, n):
        return (self.out_features, n, self.kernel_size, self.kernel_size)


class BatchNorm(Layer):
    """Batch normalization over the channel axis of (N, C) or (N, C, H, W) inputs."""

    kind = "BatchNorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.update_stats = True
        self.params["gamma"] = np.ones(self.num_features, dtype=dtype)
        self.params["beta"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.num_features, dtype=dtype)

    def config(self) -> dict:
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def _axes(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"BatchNorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, training=False):
        axes, bshape = self._axes(x)
        if x.shape[1] != self.num_features:
            raise ShapeError(f"BatchNorm expects {self.num_features} channels, got {x.shape[1]}")
        gamma = self.masked("gamma").reshape(bshape)
        beta = self.masked("beta").reshape(bshape)
        if training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if self.update_stats:
                count = x.size // self.num_features
                unbiased = var * count / max(count - 1, 1)
                m = self.momentum
                self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mu).astype(
                    self.buffers["running_mean"].dtype)
                self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(
                    self.buffers["running_var"].dtype)
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (xhat, inv_std, axes, bshape, training)
        return (gamma * xhat + beta).astype(x.dtype, copy=False)

    def backward(self, grad):
        xhat, inv_std, axes, bshape, training = self._cache
        gamma = self.masked("gamma").reshape(bshape)
        self.grads["gamma"] = np.sum(grad * xhat, axis=axes)
        self.grads["beta"] = np.sum(grad, axis=axes)
        for name, mask in self.masks.items():
            self.grads[name] = self.grads[name] * mask
        dxhat = grad * gamma
        if not training:
            return dxhat * inv_std.reshape(bshape)
        n = grad.size // self.num_features
        s1 = np.sum(dxhat, axis=axes).reshape(bshape)
        s2 = np.sum(dxhat * xhat, axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)

    def eval_affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode per-channel (scale, shift): ``y = scale * x + shift``."""
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
        scale = self.masked("gamma") * inv_std
        shift = self.masked("beta") - self.buffers["running_mean"] * scale
        return scale, shift

    def drop_channels(self, keep: np.ndarray) -> None:
        for store in (self.params, self.buffers, self.masks):
            for name in list(store):
                store[name] = np.ascontiguousarray(store[name][keep])
        self.num_features = len(keep)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self._cache


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


LAYER_TYPES = {cls.kind: cls for cls in (Linear, Conv2D, BatchNorm, ReLU, Flatten)}


def layer_from_config(kind: str, config: dict, dtype=np.float32) -> Layer:
    """Instantiate an empty layer of ``kind`` from its checkpoint config."""
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"Unknown layer kind: {kind}") from None
    if cls in (ReLU, Flatten):
        return cls()
    return cls(**config, dtype=dtype)
