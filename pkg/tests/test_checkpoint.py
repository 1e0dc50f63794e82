"""
Tests for the binary checkpoint container.
"""

import struct

import numpy as np
import pytest

from evocompress.checkpoint import (
    checkpoint_bytes,
    iter_chunks,
    load_checkpoint,
    load_checkpoint_bytes,
    payload_bytes,
    save_checkpoint,
)
from evocompress.decomposition import RankCriterion, decompose_network, fold_factors
from evocompress.exceptions import CheckpointError
from evocompress.network import build_mlp, build_tiny_resnet, model_size_bytes
from evocompress.pruning import PruneSpec, prune_network
from evocompress.quantization import apply_pdq, apply_ptq, to_fp16
from evocompress.rng import make_rng


def _assert_identical(a, b):
    assert a.describe() == b.describe()
    for la, lb in zip(a.layers, b.layers):
        assert la.precision == lb.precision
        for store in ("params", "buffers", "masks"):
            da, db = getattr(la, store), getattr(lb, store)
            assert set(da) == set(db)
            for name in da:
                assert da[name].dtype == db[name].dtype
                assert np.array_equal(da[name], db[name]), f"{la.kind} {store} {name}"
        assert la.quant == lb.quant
        assert getattr(la, "folded", False) == getattr(lb, "folded", False)


NETWORK_KINDS = ["plain", "pruned", "folded", "decomposed", "pdq", "ptq", "fp16", "resnet",
                 "resnet_pdq", "float64"]


def _networks():
    r = make_rng(0, "ckpt")
    mlp = build_mlp(6, [10], 2, "multiclass", "ce", r)
    pruned, _ = prune_network(mlp, PruneSpec(0.4))
    decomposed = decompose_network(pruned, RankCriterion("energy", 0.95))
    thinned, _ = prune_network(decomposed, PruneSpec(0.2))
    calib = r.standard_normal((32, 6))
    resnet = build_tiny_resnet((1, 5, 5), 2, 3, "multiclass", "ce", r)
    resnet.layers[1].buffers["running_mean"] = r.standard_normal(2).astype(np.float32)
    return {
        "plain": mlp,
        "pruned": pruned,
        "folded": fold_factors(thinned),
        "decomposed": thinned,
        "pdq": apply_pdq(pruned),
        "ptq": apply_ptq(mlp, calib),
        "fp16": to_fp16(decomposed),
        "resnet": resnet,
        "resnet_pdq": apply_pdq(resnet),
        "float64": build_mlp(3, [4], 1, "regression", "mse", r, dtype=np.float64),
    }


@pytest.mark.parametrize("name", NETWORK_KINDS)
def test_round_trip_is_bit_exact(name):
    """Test that every network kind reloads bit-identically."""
    net = _networks()[name]
    data = checkpoint_bytes(net)
    loaded = load_checkpoint_bytes(data)

    _assert_identical(net, loaded)
    assert checkpoint_bytes(loaded) == data


@pytest.mark.parametrize("name", ["plain", "pruned", "folded", "pdq", "fp16", "resnet"])
def test_payload_matches_model_size(name):
    """Test that stored payload bytes equal the size metric."""
    net = _networks()[name]
    assert payload_bytes(checkpoint_bytes(net)) == model_size_bytes(net)


def test_reloaded_forward_is_identical():
    """Test that a reloaded int8 network produces the same outputs."""
    net = _networks()["ptq"]
    x = make_rng(1, "x").standard_normal((5, 6)).astype(np.float32)

    assert np.array_equal(load_checkpoint_bytes(checkpoint_bytes(net)).forward(x), net.forward(x))


def test_save_and_load_file(tmp_path):
    """Test saving into a new directory and loading back."""
    net = _networks()["plain"]
    path = save_checkpoint(net, str(tmp_path / "nested" / "model.ptra"))

    _assert_identical(net, load_checkpoint(path))


def test_missing_file(tmp_path):
    """Test that a missing checkpoint raises CheckpointError."""
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ptra"))


def test_bad_magic():
    """Test that a foreign file is rejected."""
    data = b"NOPE" + checkpoint_bytes(_networks()["plain"])[4:]
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint_bytes(data)


def test_unsupported_version():
    """Test that a future container version is rejected."""
    data = bytearray(checkpoint_bytes(_networks()["plain"]))
    struct.pack_into("<I", data, 4, 99)
    with pytest.raises(CheckpointError, match="version"):
        list(iter_chunks(bytes(data)))


def test_truncated_chunk():
    """Test that a cut-off payload is detected."""
    data = checkpoint_bytes(_networks()["plain"])
    with pytest.raises(CheckpointError, match="Truncated"):
        list(iter_chunks(data[:-3]))


def test_chunk_tags():
    """Test that a decomposed int8 network writes dcmp and quan chunks."""
    net = apply_pdq(_networks()["decomposed"])
    tags = {tag for tag, _, _, _ in iter_chunks(checkpoint_bytes(net))}

    assert {b"meta", b"parm", b"mask", b"dcmp", b"quan"} <= tags
