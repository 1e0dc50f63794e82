"""
Binary checkpoint container.

Layout (all integers little endian)::

    b"PTRA" | u32 version | u64 n | n bytes of JSON network descriptor
    chunk*

    chunk = 4-byte tag | u32 layer index | u16 n | n bytes of name | u64 n | n bytes of body

Tags

``meta``  JSON layer record: kind, constructor config, precision, shapes
``parm``  raw parameter payload at the layer's storage dtype
          (float64/float32/float16, or int8 values of a quantized tensor)
``bufr``  raw buffer payload (BatchNorm running statistics)
``mask``  ``np.packbits`` of a binary mask
``quan``  u32 n | n bytes of JSON (mode, dtype, tensor names, activation
          range) | one float32 scale per named tensor
``dcmp``  JSON {rank, folded}; the factor payloads are the ``U``/``S``/``V``
          parameters (``S`` is omitted once folded)

A network written and read back is bit-identical to the original.
"""

import io
import json
import os
import struct
from typing import Dict, Iterator, Tuple

import numpy as np

from .exceptions import CheckpointError
from .layers import AffineLayer, layer_from_config
from .network import Network
from .quantization import QuantRecord

MAGIC = b"PTRA"
VERSION = 1

_FLOAT_DTYPES = {"fp64": "<f8", "fp32": "<f4", "fp16": "<f2"}


def _chunk(tag: bytes, index: int, name: str, body: bytes) -> bytes:
    encoded = name.encode("utf-8")
    return tag + struct.pack("<IH", index, len(encoded)) + encoded + struct.pack("<Q", len(body)) + body


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def _encode_param(layer, name: str, value: np.ndarray) -> bytes:
    if layer.precision == "int8" and layer.quant is not None and name in layer.quant.scales:
        scale = layer.quant.scales[name]
        q = np.rint(value.astype(np.float64) / scale)
        return np.clip(q, -127, 127).astype("<i1").tobytes()
    return value.astype(_FLOAT_DTYPES.get(layer.precision, "<f4")).tobytes()


def _decode_param(layer_precision: str, quant: dict, name: str, body: bytes, shape, dtype) -> np.ndarray:
    if layer_precision == "int8" and quant and name in quant:
        q = np.frombuffer(body, dtype="<i1").astype(np.float64)
        value = q * quant[name]
    else:
        value = np.frombuffer(body, dtype=_FLOAT_DTYPES.get(layer_precision, "<f4"))
    return value.astype(dtype).reshape(shape)


def checkpoint_bytes(net: Network) -> bytes:
    """Serialize ``net`` into the container format."""
    out = io.BytesIO()
    header = _json(net.describe())
    out.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
    for i, layer in enumerate(net.layers):
        folded = isinstance(layer, AffineLayer) and layer.folded
        stored = {k: v for k, v in layer.params.items() if not (folded and k == "S")}
        meta = {
            "kind": layer.kind,
            "config": layer.config(),
            "precision": layer.precision,
            "params": {k: list(v.shape) for k, v in stored.items()},
            "buffers": {k: list(v.shape) for k, v in layer.buffers.items()},
            "masks": {k: list(v.shape) for k, v in layer.masks.items()},
        }
        out.write(_chunk(b"meta", i, "", _json(meta)))
        if isinstance(layer, AffineLayer) and layer.is_decomposed:
            out.write(_chunk(b"dcmp", i, "", _json({"rank": layer.rank, "folded": folded})))
        if layer.quant is not None:
            names = sorted(layer.quant.scales)
            record = {
                "mode": layer.quant.mode,
                "dtype": layer.quant.dtype,
                "names": names,
                "activation_range": (list(layer.quant.activation_range)
                                     if layer.quant.activation_range is not None else None),
            }
            encoded = _json(record)
            scales = np.array([layer.quant.scales[n] for n in names], dtype="<f4").tobytes()
            out.write(_chunk(b"quan", i, "", struct.pack("<I", len(encoded)) + encoded + scales))
        for name, value in stored.items():
            out.write(_chunk(b"parm", i, name, _encode_param(layer, name, value)))
        for name, value in layer.buffers.items():
            out.write(_chunk(b"bufr", i, name,
                             value.astype(_FLOAT_DTYPES.get(layer.precision, "<f4")).tobytes()))
        for name, mask in layer.masks.items():
            out.write(_chunk(b"mask", i, name, np.packbits(mask.astype(bool).ravel()).tobytes()))
    return out.getvalue()


def iter_chunks(data: bytes) -> Iterator[Tuple[bytes, int, str, bytes]]:
    """Yield ``(tag, layer_index, name, body)`` for every chunk after the header."""
    if data[:4] != MAGIC:
        raise CheckpointError("Not a checkpoint: bad magic")
    try:
        version, n = struct.unpack_from("<IQ", data, 4)
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint header: {e}") from e
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    pos = 16 + n
    while pos < len(data):
        try:
            tag = data[pos:pos + 4]
            index, name_len = struct.unpack_from("<IH", data, pos + 4)
            pos += 10
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (body_len,) = struct.unpack_from("<Q", data, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"Malformed chunk at byte {pos}: {e}") from e
        body = data[pos:pos + body_len]
        if len(body) != body_len:
            raise CheckpointError(f"Truncated '{tag.decode(errors='replace')}' chunk")
        pos += body_len
        yield tag, index, name, body


def load_checkpoint_bytes(data: bytes) -> Network:
    """Rebuild a network from :func:`checkpoint_bytes` output."""
    if data[:4] != MAGIC:
        raise CheckpointError("Not a checkpoint: bad magic")
    (n,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"Unreadable network descriptor: {e}") from e
    dtype = np.dtype(header["dtype"])

    metas: Dict[int, dict] = {}
    quant: Dict[int, dict] = {}
    quant_scales: Dict[int, Dict[str, float]] = {}
    decomp: Dict[int, dict] = {}
    payloads: Dict[int, list] = {}
    for tag, index, name, body in iter_chunks(data):
        if tag == b"meta":
            metas[index] = json.loads(body.decode("utf-8"))
        elif tag == b"quan":
            (length,) = struct.unpack_from("<I", body, 0)
            record = json.loads(body[4:4 + length].decode("utf-8"))
            scales = np.frombuffer(body[4 + length:], dtype="<f4")
            quant[index] = record
            quant_scales[index] = {k: float(s) for k, s in zip(record["names"], scales)}
        elif tag == b"dcmp":
            decomp[index] = json.loads(body.decode("utf-8"))
        else:
            payloads.setdefault(index, []).append((tag, name, body))

    layers = []
    precisions = []
    for i, kind in enumerate(header["layers"]):
        meta = metas.get(i)
        if meta is None or meta["kind"] != kind:
            raise CheckpointError(f"Missing or inconsistent meta chunk for layer {i}")
        layer = layer_from_config(kind, meta["config"], dtype=dtype)
        layer.params = {}
        layer.buffers = {}
        layer.masks = {}
        for tag, name, body in payloads.get(i, []):
            if tag == b"parm":
                layer.params[name] = _decode_param(meta["precision"], quant_scales.get(i), name, body,
                                                   meta["params"][name], dtype)
            elif tag == b"bufr":
                raw = np.frombuffer(body, dtype=_FLOAT_DTYPES.get(meta["precision"], "<f4"))
                layer.buffers[name] = raw.astype(dtype).reshape(meta["buffers"][name])
            elif tag == b"mask":
                shape = meta["masks"][name]
                bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=int(np.prod(shape)))
                layer.masks[name] = bits.astype(dtype).reshape(shape)
            else:
                raise CheckpointError(f"Unknown chunk tag {tag!r}")
        if i in decomp and decomp[i]["folded"]:
            layer.folded = True
            layer.params["S"] = np.ones(decomp[i]["rank"], dtype=dtype)
        if i in quant:
            record = quant[i]
            rng_ = record["activation_range"]
            layer.quant = QuantRecord(mode=record["mode"], dtype=record["dtype"],
                                      scales=quant_scales[i],
                                      activation_range=tuple(rng_) if rng_ is not None else None)
        layers.append(layer)
        precisions.append(meta["precision"])

    net = Network(layers, header["task"], header["num_outputs"], header["loss"],
                  header["input_shape"], skips=[tuple(s) for s in header["skips"]], dtype=dtype)
    for layer, precision in zip(net.layers, precisions):
        layer.precision = precision
    return net


def save_checkpoint(net: Network, path: str) -> str:
    """Write ``net`` to ``path`` (parent directories are created)."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))
    return path


def load_checkpoint(path: str) -> Network:
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())


def payload_bytes(data: bytes) -> int:
    """Stored tensor bytes of a checkpoint: parameter/buffer payloads plus int8 scales."""
    total = 0
    for tag, _, _, body in iter_chunks(data):
        if tag in (b"parm", b"bufr"):
            total += len(body)
        elif tag == b"quan":
            (length,) = struct.unpack_from("<I", body, 0)
            total += len(body) - 4 - length
    return total
