"""
SVD low-rank decomposition of Linear and Conv2D layers.

A Conv2D weight (out, in, kh, kw) is matricized to (out, in*kh*kw). A
decomposed layer stores ``U`` (m x r), ``S`` (r) and ``V`` (n x r) as its
trainable parameters and computes ``x V diag(S) U^T + b``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import NumericError
from .layers import AffineLayer
from .network import Network
from .quantization import to_fp16_values

RANK_CRITERIA = ("energy", "explained_variance", "sv_proportion")

# explained_variance drops singular values below this before the energy rule
SV_EPS = 1e-10


@dataclass
class DecomposedFactors:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.S.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T

    def truncate(self, r: int) -> "DecomposedFactors":
        return DecomposedFactors(self.U[:, :r].copy(), self.S[:r].copy(), self.V[:, :r].copy())


@dataclass(frozen=True)
class RankCriterion:
    kind: str = "energy"
    threshold: float = 0.9

    def __post_init__(self):
        if self.kind not in RANK_CRITERIA:
            raise ValueError(f"Unknown rank criterion: {self.kind}")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"Rank threshold must be in (0, 1], got {self.threshold}")


def svd(matrix: np.ndarray, name: str = "matrix") -> DecomposedFactors:
    """
    Thin SVD with deterministic signs.

    Each column of ``U`` is flipped so that its largest-magnitude entry is
    positive (the matching column of ``V`` flips too).

    Raises
    ------
    NumericError
        When LAPACK does not converge; the message names ``name``.
    """
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"svd expects a 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"Cannot decompose {name}: matrix has NaN/Inf values")
    try:
        U, S, Vt = scipy.linalg.svd(w, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        try:
            U, S, Vt = scipy.linalg.svd(w, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as e:
            raise NumericError(f"SVD did not converge for {name}", term="svd") from e
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return DecomposedFactors(U * signs, S, (Vt * signs[:, None]).T)


def select_rank(S: np.ndarray, criterion: RankCriterion) -> int:
    """
    Smallest rank meeting ``criterion``; always in ``[1, len(S)]``.
    ``S`` must be non-increasing.

    energy: smallest r with cumulative ``s_i^2`` share >= threshold.
    explained_variance: energy after dropping ``s_i < 1e-10``.
    sv_proportion: number of ``s_i >= threshold * s_1``.

    Examples
    --------
    >>> select_rank(np.array([3.0, 2.0, 1.0]), RankCriterion("energy", 0.9))
    2
    """
    s = np.asarray(S, dtype=np.float64)
    if s.size == 0 or np.any(s < 0) or not np.any(s > 0):
        raise ValueError("degenerate spectrum")
    if np.any(np.diff(s) > 0):
        raise ValueError("singular values must be non-increasing")
    if criterion.kind == "sv_proportion":
        r = int(np.count_nonzero(s >= criterion.threshold * s[0]))
        return int(min(max(r, 1), s.size))
    if criterion.kind == "explained_variance":
        s = s[s >= SV_EPS]
    energy = np.cumsum(s ** 2)
    share = energy / energy[-1]
    r = int(np.argmax(share >= criterion.threshold)) + 1
    return int(min(max(r, 1), len(S)))


def recompose_layer(layer: AffineLayer) -> AffineLayer:
    """Copy of ``layer`` with its factors multiplied back into a dense weight."""
    if not layer.is_decomposed:
        return _copy_layer(layer)
    out = _copy_layer(layer)
    dense = layer.weight_matrix().reshape(layer.weight_shape).astype(layer.params["U"].dtype)
    for name in ("U", "S", "V"):
        out.params.pop(name)
        out.masks.pop(name, None)
    out.params = {"weight": dense, **out.params}
    out.folded = False
    out.quant = None
    return out


def _copy_layer(layer: AffineLayer) -> AffineLayer:
    import copy

    layer.clear_cache()
    return copy.deepcopy(layer)


def decompose_layer(layer, criterion: RankCriterion, name: str = "layer") -> AffineLayer:
    """
    Copy of ``layer`` with its weight replaced by rank-truncated SVD factors.

    An already decomposed layer is re-truncated from its current factors.
    Weight masks are folded into the matrix before decomposition and
    dropped; quantization state is cleared.

    Raises
    ------
    ValueError
        For layers other than Linear and Conv2D.
    """
    if not isinstance(layer, AffineLayer):
        raise ValueError(f"Cannot decompose a {layer.kind} layer ({name})")
    dtype = next(iter(layer.params.values())).dtype
    matrix = layer.weight_matrix()
    factors = svd(matrix, name=name)
    r = select_rank(factors.S, criterion)
    factors = factors.truncate(r)
    out = _copy_layer(layer)
    for key in ("weight", "U", "S", "V"):
        out.params.pop(key, None)
        out.masks.pop(key, None)
    bias = out.params.pop("bias", None)
    out.params["U"] = factors.U.astype(dtype)
    out.params["S"] = factors.S.astype(dtype)
    out.params["V"] = factors.V.astype(dtype)
    if bias is not None:
        out.params["bias"] = bias
    out.folded = False
    out.quant = None
    return out


def decompose_network(net: Network, criterion: RankCriterion) -> Network:
    """Decompose every Linear/Conv2D layer; other layers are left alone."""
    out = net.copy()
    for i, layer in out.affine_layers:
        out.layers[i] = decompose_layer(layer, criterion, name=f"layer {i} ({layer.kind})")
        out.layers[i].precision = out.base_precision
    return out


def fold_factors(net: Network) -> Network:
    """
    Export form: ``S`` folded into ``U`` for float decomposed layers.

    Folded layers no longer store ``S``. Int8 layers keep their factors
    as quantized.
    """
    out = net.copy()
    for _, layer in out.affine_layers:
        if not layer.is_decomposed or layer.folded or layer.precision == "int8":
            continue
        U = layer.params["U"] * layer.params["S"]
        if layer.precision == "fp16":
            U = to_fp16_values(U)
        if "U" in layer.masks:
            U = U * layer.masks["U"]
        layer.params["U"] = U.astype(layer.params["U"].dtype)
        layer.params["S"] = np.ones_like(layer.params["S"])
        layer.folded = True
    return out
