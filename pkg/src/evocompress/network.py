"""
Network container, built-in architectures and size accounting.
"""

import copy
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NumericError, ShapeError
from .layers import PRECISION_BYTES, AffineLayer, BatchNorm, Conv2D, Flatten, Layer, Linear, ReLU


class Task(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"


TASK_LOSSES = {
    Task.BINARY: ("bce", "bce_smooth"),
    Task.MULTICLASS: ("ce", "ce_smooth"),
    Task.REGRESSION: ("mse", "huber"),
}

QUALITY_METRIC = {Task.BINARY: "roc_auc", Task.MULTICLASS: "f1", Task.REGRESSION: "rmse"}

# int8 tensors carry one fp32 scale each
SCALE_BYTES = 4


class Network:
    """
    Ordered layer list with a task head.

    Parameters
    ----------
    layers : list of Layer
        Layers applied in order.
    task : Task or str
        ``binary`` (one logit), ``multiclass`` (``num_outputs`` logits) or
        ``regression`` (one output).
    num_outputs : int
        Width of the head.
    loss : str
        Task loss identifier, one of :data:`TASK_LOSSES` for the task.
    input_shape : tuple of int
        Per-sample input shape.
    skips : sequence of (int, int)
        Residual annotations ``(src, dst)``: the output of layer ``dst`` gets
        the output of layer ``src`` added.
    dtype : numpy dtype, default float32
        Float dtype of every parameter (float64 for gradient checks).
    """

    def __init__(self, layers: List[Layer], task, num_outputs: int, loss: str,
                 input_shape: Sequence[int], skips: Sequence[Tuple[int, int]] = (),
                 dtype=np.float32):
        self.layers = list(layers)
        self.task = Task(task)
        self.num_outputs = int(num_outputs)
        if loss not in TASK_LOSSES[self.task]:
            raise ValueError(f"Loss '{loss}' does not fit task '{self.task.value}'")
        self.loss = loss
        self.input_shape = tuple(int(v) for v in input_shape)
        self.skips = [(int(s), int(d)) for s, d in skips]
        for s, d in self.skips:
            if not 0 <= s < d < len(self.layers):
                raise ValueError(f"Invalid skip ({s}, {d}) for {len(self.layers)} layers")
        self.dtype = np.dtype(dtype)
        self.base_precision = "fp64" if self.dtype == np.float64 else "fp32"
        for layer in self.layers:
            if layer.params or layer.buffers:
                layer.precision = self.base_precision

    # ---- execution -------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False, update_stats: bool = True) -> np.ndarray:
        """Run every layer, adding residual skips; raises on shape or numeric faults."""
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"Expected input shape (N, {self.input_shape}), got {x.shape}")
        outs = []
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                layer.update_stats = update_stats
            h = layer.forward(h, training=training)
            for src, dst in self.skips:
                if dst == i:
                    if outs[src].shape != h.shape:
                        raise ShapeError(
                            f"Skip ({src}, {dst}) joins shapes {outs[src].shape} and {h.shape}")
                    h = h + outs[src]
            outs.append(h)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite network output", term="forward")
        return h

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Propagate ``dL/d(output)`` through every layer, filling ``layer.grads``."""
        n = len(self.layers)
        grad_outs: List[Optional[np.ndarray]] = [None] * n
        grad_outs[-1] = grad
        grad_in = None
        for i in range(n - 1, -1, -1):
            g = grad_outs[i]
            if g is None:
                continue
            for src, dst in self.skips:
                if dst == i:
                    grad_outs[src] = g if grad_outs[src] is None else grad_outs[src] + g
            grad_in = self.layers[i].backward(g)
            if i > 0:
                grad_outs[i - 1] = grad_in if grad_outs[i - 1] is None else grad_outs[i - 1] + grad_in
        return grad_in

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode raw outputs, evaluated in batches."""
        x = np.asarray(x, dtype=self.dtype)
        chunks = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.num_outputs), self.dtype)

    # ---- parameters ------------------------------------------------------
    def parameters(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        """Yield ``(layer_index, name, array)`` for every trainable parameter."""
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                if isinstance(layer, AffineLayer) and layer.folded and name == "S":
                    continue
                yield i, name, value

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.grads = {}

    def clear_caches(self) -> None:
        for layer in self.layers:
            layer.clear_cache()

    def copy(self) -> "Network":
        self.clear_caches()
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Copy with every parameter, buffer and mask cast to ``dtype``."""
        out = self.copy()
        out.dtype = np.dtype(dtype)
        out.base_precision = "fp64" if out.dtype == np.float64 else "fp32"
        for layer in out.layers:
            for store in (layer.params, layer.buffers, layer.masks):
                for name in store:
                    store[name] = store[name].astype(dtype)
            if (layer.params or layer.buffers) and layer.precision in ("fp32", "fp64"):
                layer.precision = out.base_precision
        return out

    @property
    def affine_layers(self) -> List[Tuple[int, AffineLayer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, AffineLayer)]

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    @property
    def depth(self) -> int:
        return len(self.affine_layers)

    def skip_layers(self) -> set:
        """Indices of layers whose outputs enter or leave a residual skip."""
        return {i for pair in self.skips for i in pair}

    def describe(self) -> dict:
        """JSON-able descriptor stored in the checkpoint header."""
        return {
            "task": self.task.value,
            "num_outputs": self.num_outputs,
            "loss": self.loss,
            "input_shape": list(self.input_shape),
            "skips": [list(s) for s in self.skips],
            "dtype": self.dtype.name,
            "layers": [layer.kind for layer in self.layers],
        }

    def __repr__(self) -> str:
        body = " -> ".join(repr(layer) for layer in self.layers)
        return f"Network[{self.task.value}]({body})"


def forward(net: Network, batch: np.ndarray, training: bool = False) -> np.ndarray:
    """Functional form of :meth:`Network.forward`."""
    return net.forward(batch, training=training)


def count_parameters(net: Network) -> int:
    """Number of stored elements (parameters and BN running statistics)."""
    total = 0
    for layer in net.layers:
        for name, value in layer.params.items():
            if isinstance(layer, AffineLayer) and layer.folded and name == "S":
                continue
            total += int(value.size)
        total += sum(int(v.size) for v in layer.buffers.values())
    return total


def layer_size_bytes(layer: Layer) -> int:
    per_element = PRECISION_BYTES[layer.precision]
    elements = 0
    for name, value in layer.params.items():
        if isinstance(layer, AffineLayer) and layer.folded and name == "S":
            continue
        elements += int(value.size)
    elements += sum(int(v.size) for v in layer.buffers.values())
    size = elements * per_element
    if layer.precision == "int8" and layer.quant is not None:
        size += SCALE_BYTES * len(layer.quant.scales)
    return size


def model_size_bytes(net: Network) -> int:
    """
    Stored size in bytes.

    Each stored element costs the bytes of its layer's precision
    (fp64=8, fp32=4, fp16=2, int8=1); int8 layers add a 4-byte scale per
    tensor. Masked zeros still count.

    Examples
    --------
    A 100x100 Linear with bias in fp32 is 40400 bytes; in int8 it is
    10100 + 2 * 4 bytes.
    """
    return sum(layer_size_bytes(layer) for layer in net.layers)


def sparsity(net: Network) -> float:
    """Fraction of zero-valued prunable weights."""
    total = zeros = 0
    for _, layer in net.affine_layers:
        for name in layer.prunable:
            value = layer.params[name]
            total += value.size
            zeros += int(np.count_nonzero(value == 0))
    return zeros / total if total else 0.0


def build_mlp(input_dim: int, hidden: Sequence[int], num_outputs: int, task, loss: str,
              rng: np.random.Generator, dtype=np.float32) -> Network:
    """Linear-ReLU stack with a linear head."""
    layers: List[Layer] = []
    width = int(input_dim)
    for h in hidden:
        layers.append(Linear(width, h, rng=rng, dtype=dtype))
        layers.append(ReLU())
        width = int(h)
    layers.append(Linear(width, num_outputs, rng=rng, dtype=dtype))
    return Network(layers, task, num_outputs, loss, (int(input_dim),), dtype=dtype)


def build_tiny_resnet(input_shape: Sequence[int], channels: int, num_outputs: int, task,
                      loss: str, rng: np.random.Generator, dtype=np.float32) -> Network:
    """
    Two-conv residual analogue.

    Conv-BN-ReLU, Conv-BN with the first block's ReLU output added back,
    ReLU, Flatten and a Linear head.
    """
    c, h, w = (int(v) for v in input_shape)
    layers: List[Layer] = [
        Conv2D(c, channels, 3, rng=rng, dtype=dtype),
        BatchNorm(channels, dtype=dtype),
        ReLU(),
        Conv2D(channels, channels, 3, rng=rng, dtype=dtype),
        BatchNorm(channels, dtype=dtype),
        ReLU(),
        Flatten(),
        Linear(channels * h * w, num_outputs, rng=rng, dtype=dtype),
    ]
    return Network(layers, task, num_outputs, loss, (c, h, w), skips=[(2, 4)], dtype=dtype)


def output_width(task, num_classes: int) -> int:
    return num_classes if Task(task) == Task.MULTICLASS else 1
