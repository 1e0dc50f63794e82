"""First-order optimizers with mask-aware updates."""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass
class Optimizer:
    """
    Optimizer state: kind, learning rate and per-parameter moment buffers.

    ``kind`` is ``sgd``, ``momentum`` (heavy ball, 0.9) or ``adam``
    (0.9, 0.999, 1e-8). Buffers are keyed by ``(layer_index, name)`` and
    mirror the parameter shapes.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    buffers: Dict[tuple, Dict[str, np.ndarray]] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer: {self.kind}")
        if self.learning_rate < 0:
            raise ValueError(f"Learning rate must be non-negative, got {self.learning_rate}")

    def step(self, net, grads: Dict[tuple, np.ndarray]) -> None:
        """Apply one update to every parameter with a gradient, then re-mask."""
        self.steps += 1
        lr = self.learning_rate
        if lr == 0:
            return
        for (i, name), g in grads.items():
            layer = net.layers[i]
            w = layer.params[name]
            if self.kind == "sgd":
                update = lr * g
            elif self.kind == "momentum":
                buf = self.buffers.setdefault((i, name), {"velocity": np.zeros_like(w)})
                buf["velocity"] = self.momentum * buf["velocity"] + g
                update = lr * buf["velocity"]
            else:
                b1, b2 = self.betas
                buf = self.buffers.setdefault((i, name), {"m": np.zeros_like(w), "v": np.zeros_like(w)})
                if buf["m"].shape != w.shape:
                    buf["m"], buf["v"] = np.zeros_like(w), np.zeros_like(w)
                buf["m"] = b1 * buf["m"] + (1 - b1) * g
                buf["v"] = b2 * buf["v"] + (1 - b2) * g * g
                m_hat = buf["m"] / (1 - b1 ** self.steps)
                v_hat = buf["v"] / (1 - b2 ** self.steps)
                update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            new = (w - update).astype(w.dtype, copy=False)
            mask = layer.masks.get(name)
            if mask is not None:
                new = new * mask
            layer.params[name] = new
