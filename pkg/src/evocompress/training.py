"""
Gradients and the mini-batch training loop.
"""

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NumericError
from .losses import task_loss
from .metrics import compute_quality, quality_score
from .network import QUALITY_METRIC, Network
from .optim import Optimizer
from .regularizers import (
    CompositeLoss,
    hoyer_grad,
    hoyer_loss,
    lai_direction,
    lai_loss,
    norm_grads,
    norm_loss,
    orthogonality_grads,
    orthogonality_loss,
    sparsity_grads,
    sparsity_l1,
)
from .rng import make_rng

GradDict = Dict[Tuple[int, str], np.ndarray]


@dataclass
class GradientResult:
    loss: float
    terms: Dict[str, float]
    grads: GradDict


@dataclass
class TrainResult:
    network: Network
    trace: List[float] = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0
    epochs_run: int = 0
    scores: List[float] = field(default_factory=list)


def _check_finite(value, term: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {term}", term=term)


def task_gradients(net: Network, batch: np.ndarray, targets: np.ndarray, loss_kind: str,
                   training: bool = True, update_stats: bool = True) -> Tuple[float, GradDict]:
    """Task loss and its gradient for every trainable parameter."""
    out = net.forward(batch, training=training, update_stats=update_stats)
    value, grad = task_loss(loss_kind, out, targets)
    _check_finite(value, loss_kind)
    net.zero_grads()
    net.backward(grad)
    grads = {(i, name): net.layers[i].grads[name].copy() for i, name, _ in net.parameters()}
    return value, grads


def hessian_vector_product(net: Network, batch: np.ndarray, targets: np.ndarray, loss_kind: str,
                           direction: GradDict, training: bool = True) -> GradDict:
    """
    Central-difference product of the task-loss Hessian with ``direction``.

    Parameters are restored exactly afterwards and BatchNorm running
    statistics are left untouched.
    """
    norm = float(np.sqrt(sum(np.sum(v.astype(np.float64) ** 2) for v in direction.values())))
    if norm == 0:
        return {key: np.zeros_like(v) for key, v in direction.items()}
    step = 1e-5 if net.dtype == np.float64 else 1e-2
    originals = {key: net.layers[key[0]].params[key[1]] for key in direction}
    sides = []
    try:
        for sign in (1.0, -1.0):
            for (i, name), v in direction.items():
                w = originals[(i, name)]
                net.layers[i].params[name] = (w + sign * step * v / norm).astype(w.dtype)
            _, g = task_gradients(net, batch, targets, loss_kind, training, update_stats=False)
            sides.append(g)
    finally:
        for (i, name), w in originals.items():
            net.layers[i].params[name] = w
    return {key: (norm * (sides[0][key] - sides[1][key]) / (2 * step)).astype(direction[key].dtype)
            for key in direction}


def backward(net: Network, batch: np.ndarray, targets: np.ndarray,
             loss_terms: Optional[CompositeLoss] = None, training: bool = True) -> GradientResult:
    """
    Gradient of the composite loss for every trainable parameter.

    Runs a forward pass first. Masked positions always get a zero gradient.

    Raises
    ------
    NumericError
        When the loss or the contribution of a term is not finite; the error
        names the term.
    """
    loss_terms = loss_terms or CompositeLoss(base_loss=net.loss)
    value, task_grads = task_gradients(net, batch, targets, loss_terms.base_loss, training)
    grads = {key: g.copy() for key, g in task_grads.items()}
    terms = {"train": value}

    def add(key, g):
        grads[key] = grads[key] + g.astype(grads[key].dtype)

    decomposed = [(i, layer) for i, layer in net.affine_layers if layer.is_decomposed]
    if decomposed and (loss_terms.lambda_o or loss_terms.lambda_h):
        d = len(decomposed)
        ortho = hoyer = 0.0
        for i, layer in decomposed:
            U, S, V = layer.params["U"], layer.params["S"], layer.params["V"]
            if loss_terms.lambda_o:
                ortho += orthogonality_loss(U, V)
                dU, dV = orthogonality_grads(U, V)
                add((i, "U"), loss_terms.lambda_o / d * dU)
                add((i, "V"), loss_terms.lambda_o / d * dV)
            if loss_terms.lambda_h and not layer.folded:
                if not np.any(S):
                    warnings.warn(f"Layer {i}: all singular values are zero, Hoyer term skipped",
                                  stacklevel=2)
                    continue
                hoyer += hoyer_loss(S)
                add((i, "S"), loss_terms.lambda_h / d * hoyer_grad(S))
        if loss_terms.lambda_o:
            terms["orthogonality"] = loss_terms.lambda_o / d * ortho
        if loss_terms.lambda_h:
            terms["hoyer"] = loss_terms.lambda_h / d * hoyer

    if loss_terms.sparsity:
        terms["sparsity"] = loss_terms.sparsity * sparsity_l1(net)
        for key, g in sparsity_grads(net).items():
            add(key, loss_terms.sparsity * g)
    if loss_terms.norm:
        terms["norm"] = loss_terms.norm * norm_loss(net)
        for key, g in norm_grads(net).items():
            add(key, loss_terms.norm * g)
    if loss_terms.lai:
        terms["lai"] = loss_terms.lai * lai_loss(task_grads.values(), loss_terms.lai_tau)
        direction = lai_direction(task_grads, loss_terms.lai_tau)
        hv = hessian_vector_product(net, batch, targets, loss_terms.base_loss, direction, training)
        for key, g in hv.items():
            add(key, loss_terms.lai * g)

    for term, contribution in terms.items():
        _check_finite(contribution, term)
    for (i, name), g in grads.items():
        _check_finite(g, f"gradient of layer {i} {name}")
        mask = net.layers[i].masks.get(name)
        if mask is not None:
            grads[(i, name)] = g * mask
    return GradientResult(loss=float(sum(terms.values())), terms=terms, grads=grads)


def _set_fake_quant(net: Network, enabled: bool) -> None:
    for _, layer in net.affine_layers:
        layer.fake_quant = enabled


def train(net: Network, data, epochs: int, optimizer: Optimizer,
          loss_terms: Optional[CompositeLoss] = None,
          early_stop_hook: Optional[Callable[[Sequence[float]], bool]] = None,
          batch_size: int = 32, rng: Optional[np.random.Generator] = None,
          fake_quant: bool = False) -> TrainResult:
    """
    Mini-batch training with best-validation checkpointing.

    Parameters
    ----------
    net : Network
        Network to train; it is copied, not modified.
    data : Dataset
        Provides ``x_train``, ``y_train``, ``x_val`` and ``y_val``.
    epochs : int
        Upper bound on epochs (>= 1).
    optimizer : Optimizer
        Update rule and learning rate.
    loss_terms : CompositeLoss, optional
        Task loss and regularizers; defaults to the network's plain loss.
    early_stop_hook : callable, optional
        Called after every epoch with the maximization-aligned validation
        scores so far; returning True stops training.
    batch_size : int, default 32
        Mini-batch size.
    rng : numpy.random.Generator, optional
        Shuffling stream.
    fake_quant : bool, default False
        Train with fake-quantized weights (QAT).

    Returns
    -------
    TrainResult
        The best-validation network, the raw validation quality per epoch
        and the stopped-early flag.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    rng = rng if rng is not None else make_rng(0, "train")
    work = net.copy()
    _set_fake_quant(work, fake_quant)
    x = np.asarray(data.x_train, dtype=work.dtype)
    y = np.asarray(data.y_train)
    metric = QUALITY_METRIC[work.task]
    result = TrainResult(network=net)
    best_score = -np.inf
    best = None
    start = time.perf_counter()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), batch_size):
            idx = order[lo:lo + batch_size]
            gr = backward(work, x[idx], y[idx], loss_terms)
            optimizer.step(work, gr.grads)
        quality = compute_quality(work, data.x_val, data.y_val)
        score = quality_score(quality, metric)
        result.trace.append(quality)
        result.scores.append(score)
        result.epochs_run += 1
        if score > best_score:
            best_score = score
            best = work.copy()
        if early_stop_hook is not None and early_stop_hook(list(result.scores)):
            result.stopped_early = True
            break
    best = best if best is not None else work
    _set_fake_quant(best, False)
    best.clear_caches()
    result.network = best
    result.seconds = time.perf_counter() - start
    return result
