"""
Tests for SVD factorization, rank selection and decomposed layers.
"""

import numpy as np
import pytest

from evocompress.decomposition import (
    RankCriterion,
    decompose_layer,
    decompose_network,
    fold_factors,
    recompose_layer,
    select_rank,
    svd,
)
from evocompress.layers import Conv2D, Linear
from evocompress.network import build_mlp, count_parameters
from evocompress.rng import make_rng


def test_svd_of_diagonal():
    """Test that diag(3, 2) factors into identities with S = (3, 2)."""
    f = svd(np.diag([3.0, 2.0]))

    assert np.allclose(f.S, [3.0, 2.0])
    assert np.allclose(f.U, np.eye(2))
    assert np.allclose(f.V, np.eye(2))


def test_svd_of_rank_one():
    """Test that 5 u v^T has a single non-zero singular value."""
    r = make_rng(0, "rank1")
    u = r.standard_normal(6)
    v = r.standard_normal(4)
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)

    f = svd(5.0 * np.outer(u, v))

    assert f.S[0] == pytest.approx(5.0)
    assert np.allclose(f.S[1:], 0.0, atol=1e-12)


def test_svd_reconstruction_and_signs():
    """Test reconstruction accuracy and the deterministic sign rule."""
    w = make_rng(1, "svd").standard_normal((8, 5))
    f = svd(w)

    assert np.max(np.abs(f.reconstruct() - w)) < 1e-6
    pivots = np.argmax(np.abs(f.U), axis=0)
    assert np.all(f.U[pivots, np.arange(f.U.shape[1])] > 0)
    again = svd(w)
    assert np.array_equal(f.U, again.U) and np.array_equal(f.V, again.V)


def test_svd_rejects_non_finite():
    """Test that NaN matrices are refused."""
    with pytest.raises(ValueError):
        svd(np.array([[np.nan, 1.0], [0.0, 1.0]]))


@pytest.mark.parametrize("s, criterion, expected", [
    ([3.0, 2.0, 1.0], RankCriterion("energy", 0.9), 2),
    ([3.0, 2.0, 0.0], RankCriterion("energy", 1.0), 2),
    ([10.0, 1.0, 0.5], RankCriterion("sv_proportion", 0.08), 2),
    ([4.0, 1e-12, 0.0], RankCriterion("explained_variance", 1.0), 1),
    ([1.0, 1.0, 1.0], RankCriterion("energy", 0.05), 1),
])
def test_select_rank(s, criterion, expected):
    """Test rank selection under each criterion."""
    assert select_rank(np.array(s), criterion) == expected


def test_select_rank_degenerate():
    """Test that an all-zero spectrum is rejected."""
    with pytest.raises(ValueError, match="degenerate spectrum"):
        select_rank(np.zeros(3), RankCriterion())


def test_select_rank_unsorted():
    """Test that a spectrum out of descending order is rejected."""
    with pytest.raises(ValueError, match="non-increasing"):
        select_rank(np.array([1.0, 3.0, 2.0]), RankCriterion())


def test_rank_criterion_validation():
    """Test rank criterion argument checks."""
    with pytest.raises(ValueError):
        RankCriterion("nuclear", 0.5)
    with pytest.raises(ValueError):
        RankCriterion("energy", 0.0)


def test_full_rank_linear_keeps_outputs():
    """Test that a full-rank decomposition reproduces the layer output."""
    r = make_rng(2, "linear")
    layer = Linear(6, 4, rng=r, dtype=np.float64)
    layer.params["bias"] = r.standard_normal(4)
    x = r.standard_normal((5, 6))

    decomposed = decompose_layer(layer, RankCriterion("energy", 1.0))

    assert decomposed.is_decomposed and decomposed.rank == 4
    assert np.allclose(decomposed.forward(x), layer.forward(x), atol=1e-5)


def test_full_rank_conv_keeps_outputs():
    """Test decomposition of a Conv2D kernel matrix."""
    r = make_rng(3, "conv")
    layer = Conv2D(2, 3, 3, rng=r, dtype=np.float64)
    x = r.standard_normal((2, 2, 5, 5))

    decomposed = decompose_layer(layer, RankCriterion("energy", 1.0))

    assert decomposed.params["V"].shape == (18, 3)
    assert np.allclose(decomposed.forward(x), layer.forward(x), atol=1e-5)


def test_rank_one_layer_is_exact_at_rank_one():
    """Test that a rank-1 weight truncated to rank 1 keeps its outputs."""
    r = make_rng(4, "rank1")
    layer = Linear(5, 4, rng=r, dtype=np.float64)
    layer.params["weight"] = np.outer(r.standard_normal(4), r.standard_normal(5))
    x = r.standard_normal((3, 5))

    decomposed = decompose_layer(layer, RankCriterion("energy", 0.99))

    assert decomposed.rank == 1
    assert np.allclose(decomposed.forward(x), layer.forward(x), atol=1e-5)


def test_decompose_non_affine_layer_raises():
    """Test that only Linear and Conv2D can be decomposed."""
    from evocompress.layers import ReLU

    with pytest.raises(ValueError):
        decompose_layer(ReLU(), RankCriterion())


def test_fold_and_recompose_preserve_function():
    """Test that folding S and recomposing keep the network function."""
    r = make_rng(5, "fold")
    net = build_mlp(6, [8], 2, "multiclass", "ce", r, dtype=np.float64)
    x = r.standard_normal((4, 6))
    decomposed = decompose_network(net, RankCriterion("energy", 1.0))
    folded = fold_factors(decomposed)

    assert np.allclose(folded.forward(x), net.forward(x), atol=1e-8)
    assert count_parameters(folded) < count_parameters(decomposed)
    assert all(layer.folded for _, layer in folded.affine_layers)

    dense = recompose_layer(folded.layers[0])
    assert not dense.is_decomposed
    assert np.allclose(dense.params["weight"], net.layers[0].params["weight"], atol=1e-8)


def test_redecompose_truncates_further():
    """Test that decomposing an already decomposed layer lowers its rank."""
    r = make_rng(6, "again")
    layer = Linear(10, 10, rng=r, dtype=np.float64)
    full = decompose_layer(layer, RankCriterion("energy", 1.0))

    truncated = decompose_layer(full, RankCriterion("sv_proportion", 0.5))

    assert truncated.rank < full.rank
