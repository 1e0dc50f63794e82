"""
Regularization terms for training decomposed networks.

``orthogonality_loss`` and ``hoyer_loss`` act on the factors of decomposed
layers and are averaged over those layers by ``composite_loss``. The three
auxiliary terms are off unless their weight is positive:

* sparsity: ``sum |w|`` over prunable weights
* lai: ``mean_p max(0, ||g_p|| - tau)^2`` over the task-loss gradient of
  every trainable tensor ``p``
* norm: ``sum_layers (||w||_1 / ||w||_2 - 1)``, zero-norm layers skipped
"""

import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

AUX_TERMS = ("lai", "sparsity", "norm")


@dataclass
class CompositeLoss:
    """Task loss plus weighted regularizers. All weights must be non-negative."""

    base_loss: str
    lambda_o: float = 0.0
    lambda_h: float = 0.0
    lai: float = 0.0
    sparsity: float = 0.0
    norm: float = 0.0
    lai_tau: float = 1.0

    def __post_init__(self):
        for name in ("lambda_o", "lambda_h", "lai", "sparsity", "norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"Regularizer weight '{name}' must be non-negative")
        if self.lai_tau < 0:
            raise ValueError("lai_tau must be non-negative")

    @property
    def aux_weights(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in AUX_TERMS if getattr(self, name) > 0}

    @property
    def is_plain(self) -> bool:
        return self.lambda_o == 0 and self.lambda_h == 0 and not self.aux_weights


def orthogonality_loss(U: np.ndarray, V: np.ndarray) -> float:
    """``(||U^T U - I||_F^2 + ||V^T V - I||_F^2) / r^2``."""
    r = U.shape[1]
    if r == 0 or V.shape[1] != r:
        raise ValueError(f"Orthogonality loss needs matching non-zero rank, got {U.shape}, {V.shape}")
    eye = np.eye(r)
    gu = U.T @ U - eye
    gv = V.T @ V - eye
    return float((np.sum(gu ** 2) + np.sum(gv ** 2)) / r ** 2)


def orthogonality_grads(U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r = U.shape[1]
    eye = np.eye(r)
    dU = 4.0 * U @ (U.T @ U - eye) / r ** 2
    dV = 4.0 * V @ (V.T @ V - eye) / r ** 2
    return dU.astype(U.dtype), dV.astype(V.dtype)


def hoyer_loss(S: np.ndarray) -> float:
    """``||S||_1 / ||S||_2``, in ``[1, sqrt(len(S))]``."""
    S = np.asarray(S, dtype=np.float64)
    l2 = np.sqrt(np.sum(S ** 2))
    if l2 == 0:
        raise ValueError("undefined ratio: all singular values are zero")
    return float(np.sum(np.abs(S)) / l2)


def hoyer_grad(S: np.ndarray) -> np.ndarray:
    s = np.asarray(S, dtype=np.float64)
    l1 = np.sum(np.abs(s))
    l2 = np.sqrt(np.sum(s ** 2))
    return (np.sign(s) / l2 - l1 * s / l2 ** 3).astype(S.dtype)


def composite_loss(l_train: float, factors: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
                   lambda_o: float, lambda_h: float,
                   aux: Optional[Dict[str, Tuple[float, float]]] = None) -> float:
    """
    Total loss of a regularized training step.

    Parameters
    ----------
    l_train : float
        Task loss.
    factors : sequence of (U, S, V)
        Factors of every decomposed layer; may be empty.
    lambda_o, lambda_h : float
        Weights of the orthogonality and Hoyer terms, averaged over layers.
    aux : dict, optional
        ``name -> (weight, value)`` of auxiliary terms.
    """
    total = float(l_train)
    if factors:
        d = len(factors)
        if lambda_o:
            total += lambda_o / d * sum(orthogonality_loss(U, V) for U, _, V in factors)
        if lambda_h:
            hoyer = 0.0
            for _, S, _ in factors:
                if not np.any(S):
                    warnings.warn("Skipping Hoyer term of a layer with all-zero singular values",
                                  stacklevel=2)
                    continue
                hoyer += hoyer_loss(S)
            total += lambda_h / d * hoyer
    for weight, value in (aux or {}).values():
        total += weight * value
    return total


def _prunable(net) -> List[Tuple[int, str, np.ndarray]]:
    return [(i, name, layer.params[name]) for i, layer in net.affine_layers for name in layer.prunable]


def sparsity_l1(net) -> float:
    return float(sum(np.sum(np.abs(w)) for _, _, w in _prunable(net)))


def sparsity_grads(net) -> Dict[tuple, np.ndarray]:
    return {(i, name): np.sign(w) for i, name, w in _prunable(net)}


def _layer_norm_stats(layer) -> Tuple[float, float]:
    l1 = sum(float(np.sum(np.abs(layer.params[n]))) for n in layer.prunable)
    l2 = np.sqrt(sum(float(np.sum(layer.params[n].astype(np.float64) ** 2)) for n in layer.prunable))
    return l1, l2


def norm_loss(net) -> float:
    total = 0.0
    for _, layer in net.affine_layers:
        l1, l2 = _layer_norm_stats(layer)
        if l2 == 0:
            continue
        total += l1 / l2 - 1.0
    return total


def norm_grads(net) -> Dict[tuple, np.ndarray]:
    grads = {}
    for i, layer in net.affine_layers:
        l1, l2 = _layer_norm_stats(layer)
        if l2 == 0:
            continue
        for name in layer.prunable:
            w = layer.params[name]
            grads[(i, name)] = (np.sign(w) / l2 - l1 * w / l2 ** 3).astype(w.dtype)
    return grads


def lai_loss(gradients: Iterable[np.ndarray], tau: float = 1.0) -> float:
    grads = list(gradients)
    if not grads:
        return 0.0
    hinge = [max(0.0, float(np.linalg.norm(g)) - tau) ** 2 for g in grads]
    return float(np.mean(hinge))


def lai_direction(gradients: Dict[tuple, np.ndarray], tau: float = 1.0) -> Dict[tuple, np.ndarray]:
    """
    ``d lai / d g`` for every tensor.

    The weight gradient of the lai term is the Hessian-vector product of the
    task loss with this direction.
    """
    n = len(gradients)
    out = {}
    for key, g in gradients.items():
        norm = float(np.linalg.norm(g))
        excess = norm - tau
        if excess > 0 and norm > 0:
            out[key] = (2.0 * excess / n) * g / norm
        else:
            out[key] = np.zeros_like(g)
    return out


def aux_regularizers(net, gradients: Optional[Dict[tuple, np.ndarray]] = None,
                     tau: float = 1.0) -> Dict[str, float]:
    """Unweighted value of every auxiliary term; ``lai`` needs ``gradients``."""
    values = {"sparsity": sparsity_l1(net), "norm": norm_loss(net)}
    if gradients is not None:
        values["lai"] = lai_loss(gradients.values(), tau)
    return values
