"""Task losses. Each returns ``(value, dL/d(outputs))`` averaged over the batch."""

from typing import Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

LABEL_SMOOTHING = 0.1
HUBER_DELTA = 1.0


def _column(outputs: np.ndarray) -> np.ndarray:
    if outputs.ndim != 2 or outputs.shape[1] != 1:
        raise ValueError(f"Expected (N, 1) outputs, got {outputs.shape}")
    return outputs[:, 0]


def binary_cross_entropy(outputs, targets, smoothing: float = 0.0) -> Tuple[float, np.ndarray]:
    z = _column(outputs)
    y = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if smoothing:
        y = y * (1 - smoothing) + 0.5 * smoothing
    n = z.shape[0]
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    grad = ((expit(z) - y) / n).reshape(-1, 1).astype(outputs.dtype)
    return float(loss), grad


def cross_entropy(outputs, targets, smoothing: float = 0.0) -> Tuple[float, np.ndarray]:
    n, k = outputs.shape
    labels = np.asarray(targets).reshape(-1).astype(int)
    target = np.zeros((n, k), dtype=outputs.dtype)
    target[np.arange(n), labels] = 1
    if smoothing:
        target = target * (1 - smoothing) + smoothing / k
    loss = -np.sum(target * log_softmax(outputs, axis=1)) / n
    grad = ((softmax(outputs, axis=1) - target) / n).astype(outputs.dtype)
    return float(loss), grad


def mean_squared_error(outputs, targets) -> Tuple[float, np.ndarray]:
    o = _column(outputs)
    r = o - np.asarray(targets, dtype=o.dtype).reshape(-1)
    n = r.shape[0]
    return float(np.mean(r ** 2)), (2 * r / n).reshape(-1, 1).astype(outputs.dtype)


def huber(outputs, targets, delta: float = HUBER_DELTA) -> Tuple[float, np.ndarray]:
    o = _column(outputs)
    r = o - np.asarray(targets, dtype=o.dtype).reshape(-1)
    n = r.shape[0]
    small = np.abs(r) <= delta
    loss = np.where(small, 0.5 * r ** 2, delta * (np.abs(r) - 0.5 * delta))
    grad = np.where(small, r, delta * np.sign(r)) / n
    return float(np.mean(loss)), grad.reshape(-1, 1).astype(outputs.dtype)


def task_loss(kind: str, outputs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Dispatch on the loss identifier stored in the network / H_M."""
    if kind == "bce":
        return binary_cross_entropy(outputs, targets)
    if kind == "bce_smooth":
        return binary_cross_entropy(outputs, targets, LABEL_SMOOTHING)
    if kind == "ce":
        return cross_entropy(outputs, targets)
    if kind == "ce_smooth":
        return cross_entropy(outputs, targets, LABEL_SMOOTHING)
    if kind == "mse":
        return mean_squared_error(outputs, targets)
    if kind == "huber":
        return huber(outputs, targets)
    raise ValueError(f"Unknown loss: {kind}")
