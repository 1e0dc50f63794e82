"""
One-shot pruning: importance scores, masks and structured compaction.

Prunable tensors are the Linear/Conv2D weights (the ``U``/``V`` factors of
decomposed layers). Biases and BatchNorm parameters are never scored.
Each Pr stage prunes ``floor(ratio * N)`` of the weights still alive, so a
dense tensor ends at exactly that sparsity and chained stages compound.
Unstructured zeros are still stored; only structured compaction shrinks a
model.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ShapeError
from .layers import AffineLayer, BatchNorm, Conv2D, Flatten, ReLU
from .network import Network
from .quantization import quantize_to_grid

CRITERIA = ("magnitude", "taylor", "hessian", "bn_scale", "lamp")
SCOPES = ("layer", "global")

Key = Tuple[int, str]


@dataclass(frozen=True)
class ImportanceCriterion:
    kind: str = "magnitude"
    scope: str = "layer"

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"Unknown importance criterion: {self.kind}")
        if self.scope not in SCOPES:
            raise ValueError(f"Unknown pruning scope: {self.scope}")

    @property
    def needs_gradients(self) -> bool:
        return self.kind in ("taylor", "hessian")


@dataclass(frozen=True)
class PruneSpec:
    ratio: float
    criterion: ImportanceCriterion = ImportanceCriterion()
    structured: bool = False

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ValueError(f"Pruning ratio must be in [0, 1), got {self.ratio}")


def prune_count(ratio: float, n: int) -> int:
    """``floor(ratio * n)``, robust to binary representation of decimal ratios."""
    return int(math.floor(round(ratio * n, 9)))


def lamp_scores(w: np.ndarray) -> np.ndarray:
    """
    Layer-adaptive magnitude scores.

    With weights sorted ascending by ``w^2``, ``score_i = w_i^2 / sum_{j>=i} w_j^2``.
    The largest weight scores exactly 1.
    """
    sq = np.asarray(w, dtype=np.float64).ravel() ** 2
    order = np.argsort(sq, kind="stable")
    sorted_sq = sq[order]
    suffix = np.cumsum(sorted_sq[::-1])[::-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(suffix > 0, sorted_sq / suffix, 0.0)
    scores = np.empty_like(sq)
    scores[order] = ratio
    return scores.reshape(np.shape(w))


def _following_batchnorm(net: Network, index: int) -> Optional[BatchNorm]:
    nxt = index + 1
    if nxt < len(net.layers) and isinstance(net.layers[nxt], BatchNorm):
        return net.layers[nxt]
    return None


def prunable_tensors(net: Network, criterion: Optional[ImportanceCriterion] = None) -> List[Key]:
    keys = []
    for i, layer in net.affine_layers:
        if criterion is not None and criterion.kind == "bn_scale":
            if _following_batchnorm(net, i) is None:
                continue
            keys.append((i, "U" if layer.is_decomposed else "weight"))
            continue
        keys.extend((i, name) for name in layer.prunable)
    return keys


def _calibration_gradients(net: Network, calib_batch) -> Dict[Key, np.ndarray]:
    from .training import task_gradients

    x, y = calib_batch
    work = net.copy()
    _, grads = task_gradients(work, np.asarray(x, dtype=work.dtype), np.asarray(y), work.loss,
                              training=False)
    return grads


def importance_scores(net: Network, criterion: ImportanceCriterion,
                      calib_batch=None) -> Dict[Key, np.ndarray]:
    """
    Non-negative score per prunable weight.

    magnitude ``|w|``; taylor ``|w g|``; hessian ``w^2 g^2 / 2`` (squared
    gradient as the Hessian diagonal); bn_scale ``|gamma|`` of the following
    BatchNorm broadcast over the channel's weights; lamp as in
    :func:`lamp_scores`.

    Parameters
    ----------
    calib_batch : tuple of (x, y), optional
        Required by taylor and hessian.

    Raises
    ------
    ValueError
        When a gradient criterion has no calibration batch, or bn_scale is
        used on a network without BatchNorm.
    """
    if criterion.needs_gradients and calib_batch is None:
        raise ValueError(f"Criterion '{criterion.kind}' needs a calibration batch")
    if criterion.kind == "bn_scale" and not net.has_batchnorm:
        raise ValueError("Criterion 'bn_scale' needs a network with BatchNorm layers")
    grads = _calibration_gradients(net, calib_batch) if criterion.needs_gradients else {}
    scores = {}
    for i, name in prunable_tensors(net, criterion):
        w = net.layers[i].masked(name).astype(np.float64)
        if criterion.kind == "magnitude":
            s = np.abs(w)
        elif criterion.kind == "taylor":
            s = np.abs(w * grads[(i, name)])
        elif criterion.kind == "hessian":
            s = 0.5 * w ** 2 * grads[(i, name)].astype(np.float64) ** 2
        elif criterion.kind == "lamp":
            s = lamp_scores(w)
        else:
            gamma = np.abs(_following_batchnorm(net, i).masked("gamma").astype(np.float64))
            s = np.broadcast_to(gamma.reshape((-1,) + (1,) * (w.ndim - 1)), w.shape).copy()
        scores[(i, name)] = s
    return scores


def channel_scores(net: Network, criterion: ImportanceCriterion,
                   weight_scores: Dict[Key, np.ndarray]) -> Dict[int, np.ndarray]:
    """Per-output-channel scores for structured pruning; the head layer is excluded."""
    head = net.affine_layers[-1][0]
    out = {}
    for (i, name), s in weight_scores.items():
        if i == head or name == "V":
            continue
        if criterion.kind == "bn_scale":
            out[i] = np.abs(_following_batchnorm(net, i).masked("gamma").astype(np.float64))
        else:
            out[i] = s.reshape(s.shape[0], -1).sum(axis=1)
    return out


def _select(score_list: List[np.ndarray], alive_list: List[np.ndarray], ratio: float,
            ) -> List[np.ndarray]:
    """Drop ``floor(ratio * alive)`` lowest-scoring alive positions (ties: lower flat index)."""
    flat_scores = np.concatenate([s.ravel() for s in score_list])
    flat_alive = np.concatenate([a.ravel() for a in alive_list])
    candidates = np.flatnonzero(flat_alive)
    k = prune_count(ratio, candidates.size)
    keep = flat_alive.copy()
    if k:
        order = np.argsort(flat_scores[candidates], kind="stable")
        keep[candidates[order[:k]]] = False
    out, pos = [], 0
    for s in score_list:
        out.append(keep[pos:pos + s.size].reshape(s.shape))
        pos += s.size
    return out


def _clamp(keep: np.ndarray, scores: np.ndarray, alive: np.ndarray, label: str,
           records: List[str]) -> np.ndarray:
    if keep.any() or not alive.any():
        return keep
    masked_scores = np.where(alive, scores, -np.inf).ravel()
    best = int(np.argmax(masked_scores))
    flat = keep.ravel().copy()
    flat[best] = True
    keep = flat.reshape(keep.shape)
    message = f"Pruning would empty {label}; keeping its highest-scoring entry"
    warnings.warn(message, stacklevel=3)
    records.append(message)
    return keep


def build_mask(scores: np.ndarray, spec: PruneSpec, alive: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Binary mask for a single tensor.

    Examples
    --------
    >>> build_mask(np.array([0.1, 0.5, 0.3, 0.05]), PruneSpec(0.5)).tolist()
    [0.0, 1.0, 1.0, 0.0]
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("Importance scores must be finite")
    alive = np.ones(scores.shape, dtype=bool) if alive is None else alive.astype(bool)
    keep = _select([scores], [alive], spec.ratio)[0]
    if spec.criterion.scope == "layer" and not spec.structured:
        keep = _clamp(keep, scores, alive, "the tensor", [])
    return keep.astype(np.float64)


def build_masks(net: Network, scores: Dict[Key, np.ndarray], spec: PruneSpec
                ) -> Tuple[Dict[Key, np.ndarray], List[str]]:
    """
    Masks for every scored tensor of ``net``.

    Returns the masks (structured mode includes the matching bias masks)
    and the warning records emitted by the clamp. Global scope prunes
    exactly ``floor(ratio * N)`` alive weights even when that empties a
    tensor; only unstructured per-layer masks are clamped.
    """
    records: List[str] = []
    for s in scores.values():
        if not np.all(np.isfinite(s)):
            raise ValueError("Importance scores must be finite")
    if spec.structured:
        return _structured_masks(net, scores, spec), records

    keys = sorted(scores)
    alive = {}
    for i, name in keys:
        mask = net.layers[i].masks.get(name)
        alive[(i, name)] = np.ones(scores[(i, name)].shape, bool) if mask is None else mask != 0
    if spec.criterion.scope == "global":
        kept = dict(zip(keys, _select([scores[k] for k in keys], [alive[k] for k in keys], spec.ratio)))
    else:
        kept = {k: _clamp(_select([scores[k]], [alive[k]], spec.ratio)[0], scores[k], alive[k],
                          f"layer {k[0]} {k[1]}", records)
                for k in keys}
    masks = {k: kept[k].astype(net.dtype) for k in keys}
    return masks, records


def _structured_masks(net: Network, scores: Dict[Key, np.ndarray], spec: PruneSpec
                      ) -> Dict[Key, np.ndarray]:
    chan = channel_scores(net, spec.criterion, scores)
    # both branches of a residual addition keep the same channels
    units = [(a, b) for a, b, _, _ in residual_groups(net) if a in chan and b in chan]
    grouped = {i for unit in units for i in unit}
    units = sorted(units + [(i,) for i in chan if i not in grouped])
    unit_scores = [sum(chan[i] for i in unit) for unit in units]
    unit_alive = [np.any([_alive_channels(net.layers[i]) for i in unit], axis=0) for unit in units]
    if spec.criterion.scope == "global":
        kept = _select(unit_scores, unit_alive, spec.ratio)
    else:
        kept = [_select([s], [a], spec.ratio)[0] for s, a in zip(unit_scores, unit_alive)]
    masks = {}
    for unit, keep in zip(units, kept):
        for i in unit:
            layer = net.layers[i]
            name = "U" if layer.is_decomposed else "weight"
            shape = layer.params[name].shape
            row = keep.astype(net.dtype).reshape((-1,) + (1,) * (len(shape) - 1))
            masks[(i, name)] = np.broadcast_to(row, shape).copy()
            if "bias" in layer.params:
                masks[(i, "bias")] = keep.astype(net.dtype)
    return masks


def _alive_channels(layer: AffineLayer) -> np.ndarray:
    name = "U" if layer.is_decomposed else "weight"
    mask = layer.masks.get(name)
    if mask is None:
        return np.ones(layer.out_features, dtype=bool)
    return mask.reshape(mask.shape[0], -1).any(axis=1)


def apply_mask(net: Network, masks: Dict[Key, np.ndarray]) -> Network:
    """
    Copy of ``net`` with masks installed and masked weights zeroed.

    Masks combine with masks already present. Stored size is unchanged.
    """
    out = net.copy()
    for (i, name), mask in masks.items():
        layer = out.layers[i]
        if name not in layer.params:
            raise ShapeError(f"Layer {i} has no parameter '{name}'")
        if mask.shape != layer.params[name].shape:
            raise ShapeError(f"Mask shape {mask.shape} does not match layer {i} {name} "
                             f"{layer.params[name].shape}")
        mask = (np.asarray(mask) != 0).astype(out.dtype)
        if name in layer.masks:
            mask = mask * layer.masks[name]
        layer.masks[name] = mask
        layer.params[name] = layer.params[name] * mask
    return out


def _consumer_path(net: Network, index: int):
    """Layers between ``index`` and the next affine layer, plus that layer's index."""
    path = []
    for j in range(index + 1, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, AffineLayer):
            return path, j
        path.append(j)
    return path, None


def _producer(net: Network, index: int) -> Optional[int]:
    """Affine layer feeding ``index`` through BatchNorm/ReLU layers only."""
    j = index
    while j >= 0 and not isinstance(net.layers[j], AffineLayer):
        if not isinstance(net.layers[j], (BatchNorm, ReLU)):
            return None
        j -= 1
    return j if j >= 0 else None


def residual_groups(net: Network) -> List[Tuple[int, int, int, int]]:
    """
    ``(a, b, src, dst)`` for each skip joining the outputs of affine layers
    ``a`` and ``b``, where ``b`` consumes the skip source ``src``.

    The addition ties the output channels of ``a`` and ``b``: they are pruned
    and compacted together. Skips of any other shape are not grouped.
    """
    head = net.affine_layers[-1][0]
    groups = []
    for src, dst in net.skips:
        a, b = _producer(net, src), _producer(net, dst)
        if a is None or b is None or b == head or src != b - 1:
            continue
        if net.layers[a].out_features != net.layers[b].out_features:
            continue
        span = set(range(a, dst + 1))
        if any(set(pair) & span for pair in net.skips if pair != (src, dst)):
            continue
        groups.append((a, b, src, dst))
    return groups


def _dead_channels(layer: AffineLayer) -> np.ndarray:
    name = "U" if layer.is_decomposed else "weight"
    mask = layer.masks.get(name)
    if mask is None:
        return np.zeros(layer.out_features, dtype=bool)
    dead = ~mask.reshape(mask.shape[0], -1).any(axis=1)
    if "bias" in layer.params:
        bias_mask = layer.masks.get("bias")
        bias_dead = (bias_mask == 0) if bias_mask is not None else (layer.params["bias"] == 0)
        dead &= bias_dead
    return dead


def _channel_constant(net: Network, path, start: np.ndarray) -> np.ndarray:
    """Eval-mode value of constant channels ``start`` after the BatchNorm/ReLU layers of ``path``."""
    const = np.asarray(start, dtype=np.float64)
    for j in path:
        layer = net.layers[j]
        if isinstance(layer, BatchNorm):
            scale, shift = layer.eval_affine()
            const = scale.astype(np.float64) * const + shift.astype(np.float64)
        elif isinstance(layer, ReLU):
            const = np.maximum(const, 0.0)
    return const


def _drop_channels(net: Network, path, keep: np.ndarray) -> None:
    for j in path:
        if isinstance(net.layers[j], BatchNorm):
            net.layers[j].drop_channels(keep)


def _shrink_consumer(net: Network, consumer: AffineLayer, width: int, keep: np.ndarray,
                     removed: np.ndarray, const: np.ndarray, flatten: bool) -> None:
    """Remove the inputs fed by ``removed`` channels, folding their constant into the bias."""
    if isinstance(consumer, Conv2D):
        # callers only remove channels whose constant is zero
        k2 = consumer.kernel_size ** 2
        consumer.drop_inputs((keep[:, None] * k2 + np.arange(k2)).ravel(), len(keep))
        return
    per = consumer.fan_in // width if flatten else 1
    col_keep = (keep[:, None] * per + np.arange(per)).ravel()
    col_drop = (removed[:, None] * per + np.arange(per)).ravel()
    fold = np.repeat(const[removed], per)
    if np.any(fold != 0):
        dense = consumer.weight_matrix().astype(np.float64)
        shift_bias = dense[:, col_drop] @ fold
        if "bias" not in consumer.params:
            consumer.params["bias"] = np.zeros(consumer.out_features, dtype=net.dtype)
        bias = consumer.params["bias"].astype(np.float64) + shift_bias
        consumer.params["bias"] = bias.astype(net.dtype)
        if consumer.precision == "int8" and consumer.quant is not None:
            grid, scale = quantize_to_grid(consumer.params["bias"])
            consumer.params["bias"] = grid
            consumer.quant.scales["bias"] = scale
    consumer.drop_inputs(col_keep, len(col_keep))


def _compact_residual(net: Network, group: Tuple[int, int, int, int], warn) -> bool:
    """Remove the channels dead in both branches of a residual addition."""
    a, b, src, dst = group
    first, second = net.layers[a], net.layers[b]
    dead_a, dead_b = _dead_channels(first), _dead_channels(second)
    if np.any(dead_a != dead_b):
        warn(f"Layers {a} and {b}: channels dead in only one branch of a residual addition kept")
    dead = dead_a & dead_b
    tail, consumer_index = _consumer_path(net, b)
    if not dead.any() or consumer_index is None:
        return False
    consumer = net.layers[consumer_index]
    width = first.out_features
    shortcut = _channel_constant(net, range(a + 1, src + 1), np.zeros(width))
    joined = _channel_constant(net, range(b + 1, dst + 1), np.zeros(width)) + shortcut
    const = _channel_constant(net, [j for j in tail if j > dst], joined)
    blocked = shortcut != 0
    if isinstance(consumer, Conv2D):
        blocked |= const != 0
    if np.any(dead & blocked):
        # zero padding makes a constant input channel position-dependent
        dead &= ~blocked
        warn(f"Layers {a} and {b}: channels with a non-zero constant output kept before a convolution")
        if not dead.any():
            return False
    keep, removed = np.flatnonzero(~dead), np.flatnonzero(dead)
    flatten = any(isinstance(net.layers[j], Flatten) for j in tail)

    first.drop_outputs(keep)
    _drop_channels(net, range(a + 1, src + 1), keep)
    _shrink_consumer(net, second, width, keep, removed, shortcut, flatten=False)
    second.drop_outputs(keep)
    _drop_channels(net, tail, keep)
    _shrink_consumer(net, consumer, width, keep, removed, const, flatten)
    return True


def compact(net: Network) -> Tuple[Network, List[str]]:
    """
    Physically remove fully masked output channels.

    The consumer layer (the next Linear/Conv2D) loses the matching inputs.
    When a BatchNorm sits in between, the channel's constant eval-mode output
    (after ReLU if present) is folded into the consumer bias. The two
    branches of a residual addition (see :func:`residual_groups`) lose a
    channel only when it is dead in both; other layers touching a skip are
    left alone.

    Returns
    -------
    tuple of (Network, list of str)
        Compacted copy and warning records. Unstructured masks give a no-op
        with a warning.
    """
    out = net.copy()
    records: List[str] = []

    def warn(message: str) -> None:
        warnings.warn(message, stacklevel=3)
        records.append(message)

    head = out.affine_layers[-1][0]
    groups = residual_groups(out)
    grouped = {i for a, b, _, _ in groups for i in (a, b)}
    removed_any = False
    has_masks = any(layer.masks for _, layer in out.affine_layers)
    for group in groups:
        removed_any |= _compact_residual(out, group, warn)

    skip_layers = out.skip_layers()
    for i, layer in out.affine_layers:
        if i == head or i in grouped:
            continue
        dead = _dead_channels(layer)
        if not dead.any():
            continue
        path, consumer_index = _consumer_path(out, i)
        if consumer_index is None:
            continue
        if {i, consumer_index, *path} & skip_layers:
            warn(f"Layer {i} feeds a residual connection; channels not compacted")
            continue
        consumer = out.layers[consumer_index]
        flatten = any(isinstance(out.layers[j], Flatten) for j in path)
        const = _channel_constant(out, path, np.zeros(layer.out_features))
        if isinstance(consumer, Conv2D) and np.any(const[dead] != 0):
            # zero padding makes a constant input channel position-dependent
            dead &= const == 0
            warn(f"Layer {i}: channels with a non-zero constant output kept before a convolution")
            if not dead.any():
                continue
        keep, removed = np.flatnonzero(~dead), np.flatnonzero(dead)
        width = layer.out_features

        layer.drop_outputs(keep)
        _drop_channels(out, path, keep)
        _shrink_consumer(out, consumer, width, keep, removed, const, flatten)
        removed_any = True

    if not removed_any and has_masks:
        warn("compact found no fully pruned channels (unstructured masks); nothing removed")
    return out, records


def prune_network(net: Network, spec: PruneSpec, calib_batch=None,
                  compact_after: bool = False) -> Tuple[Network, List[str]]:
    """Scores, masks, application and optional compaction in one call."""
    scores = importance_scores(net, spec.criterion, calib_batch)
    masks, records = build_masks(net, scores, spec)
    pruned = apply_mask(net, masks)
    if compact_after:
        pruned, more = compact(pruned)
        records.extend(more)
    return pruned, records
