"""Binary formats: weight messages, checkpoints and windowed-dataset files.

All integers are little-endian. A weight message is::

    magic "FSWS" | version u16 | dtype code u8 (4 or 8) | reserved u8
    | layer_count u32 | transmitted u32                       (16 bytes)
    then per transmitted layer:
    layer_index u32 | ndim u32 | dims u32 * ndim | bias_len u32
    then per transmitted layer: weights (row-major), bias

The communication ledger counts only the tensor payload; the descriptor
header is treated as framing.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import ModelArchitecture, WeightSet

WEIGHTS_MAGIC = b"FSWS"
CHECKPOINT_MAGIC = b"FSCK"
DATASET_MAGIC = b"FSWD"
FORMAT_VERSION = 1

_FIXED = struct.Struct("<4sHBBII")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class SerializationError(ValueError):
    """Malformed or truncated binary payload."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" (at byte {offset})" if offset is not None else ""
        super().__init__(message + where)


def _selected(w: WeightSet, layer_mask) -> list[int]:
    present = [i for i, a in enumerate(w.weights) if a is not None]
    if layer_mask is None:
        return present
    mask = set(layer_mask)
    return [i for i in present if i in mask]


def header_nbytes(w: WeightSet, layer_mask=None) -> int:
    return _FIXED.size + sum(12 + 4 * w.weights[i].ndim for i in _selected(w, layer_mask))


def payload_nbytes(w: WeightSet, layer_mask=None, dtype=np.float32) -> int:
    """Tensor bytes for the selected layers at the given float width."""
    item = np.dtype(dtype).itemsize
    return sum(item * (w.weights[i].size + w.biases[i].size) for i in _selected(w, layer_mask))


def serialize_weights(w: WeightSet, layer_mask=None, dtype=np.float32) -> bytes:
    """Encode the layers in ``layer_mask`` (all weighted layers when None)."""
    dt = np.dtype(dtype).newbyteorder("<")
    if dt.itemsize not in _DTYPES or dt.kind != "f":
        raise ValueError(f"unsupported float dtype {dtype}")
    layers = _selected(w, layer_mask)
    parts = [_FIXED.pack(WEIGHTS_MAGIC, FORMAT_VERSION, dt.itemsize, 0, w.layer_count, len(layers))]
    for i in layers:
        shape = w.weights[i].shape
        parts.append(struct.pack(f"<II{len(shape)}II", i, len(shape), *shape, w.biases[i].size))
    for i in layers:
        parts.append(np.ascontiguousarray(w.weights[i], dtype=dt).tobytes())
        parts.append(np.ascontiguousarray(w.biases[i], dtype=dt).tobytes())
    return b"".join(parts)


def deserialize_weights(data: bytes, template: WeightSet | None = None) -> WeightSet:
    """Decode a weight message.

    Layers absent from the message are copied from ``template`` when given,
    otherwise left as None. Values are widened to float64 whatever the wire
    width.
    """
    data = bytes(data)
    if len(data) < _FIXED.size:
        raise SerializationError(f"payload of {len(data)} bytes is shorter than the fixed header", 0)
    magic, version, code, _, layer_count, count = _FIXED.unpack_from(data, 0)
    if magic != WEIGHTS_MAGIC:
        raise SerializationError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise SerializationError(f"unknown dtype code {code}", 6)
    if count > layer_count:
        raise SerializationError(f"{count} transmitted layers exceed layer count {layer_count}", 12)
    dt = _DTYPES[code]
    off = _FIXED.size
    descriptors = []
    for _ in range(count):
        if off + 8 > len(data):
            raise SerializationError("truncated layer descriptor", off)
        index, ndim = struct.unpack_from("<II", data, off)
        if index >= layer_count or ndim > 8:
            raise SerializationError(f"invalid descriptor (layer {index}, ndim {ndim})", off)
        off += 8
        if off + 4 * ndim + 4 > len(data):
            raise SerializationError("truncated layer descriptor", off)
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (bias_len,) = struct.unpack_from("<I", data, off)
        off += 4
        descriptors.append((index, shape, bias_len))
    expected = off + sum(dt.itemsize * (int(np.prod(s)) + b) for _, s, b in descriptors)
    if expected != len(data):
        raise SerializationError(f"payload length {len(data)} != expected {expected}", off)

    if template is not None:
        out = template.copy()
        if out.layer_count != layer_count:
            raise SerializationError(
                f"message has {layer_count} layers, template has {out.layer_count}"
            )
    else:
        out = WeightSet([None] * layer_count, [None] * layer_count)
    for index, shape, bias_len in descriptors:
        size = int(np.prod(shape))
        out.weights[index] = np.frombuffer(data, dt, size, off).reshape(shape).astype(np.float64)
        off += size * dt.itemsize
        out.biases[index] = np.frombuffer(data, dt, bias_len, off).astype(np.float64)
        off += bias_len * dt.itemsize
    return out


_CKPT = struct.Struct("<4sHHI")


def save_checkpoint(path, arch: ModelArchitecture, w: WeightSet, meta: dict | None = None) -> None:
    """Architecture + full-precision weights in one versioned file."""
    w.check(arch)
    doc = json.dumps({"arch": arch.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    blob = serialize_weights(w, dtype=np.float64)
    Path(path).write_bytes(_CKPT.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, 0, len(doc)) + doc + blob)


def load_checkpoint(path):
    """Returns ``(arch, weights, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT.size:
        raise SerializationError("checkpoint shorter than its header", 0)
    magic, version, _, doc_len = _CKPT.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise SerializationError(f"bad checkpoint magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported checkpoint version {version}", 4)
    start = _CKPT.size
    try:
        doc = json.loads(data[start:start + doc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"unreadable checkpoint metadata: {exc}", start) from None
    try:
        arch = ModelArchitecture.from_dict(doc["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"invalid architecture in checkpoint: {exc}", start) from None
    w = deserialize_weights(data[start + doc_len:])
    w.check(arch)
    return arch, w, doc.get("meta", {})


_DS = struct.Struct("<4sHHIII")


def save_dataset(path, frames: np.ndarray, labels: np.ndarray) -> None:
    """Header with dims, row-major float32 frames, then int32 labels."""
    frames = np.asarray(frames)
    n, length, channels = frames.shape
    if len(labels) != n:
        raise ValueError("frames and labels differ in length")
    with open(path, "wb") as fh:
        fh.write(_DS.pack(DATASET_MAGIC, FORMAT_VERSION, 0, n, length, channels))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_dataset(path):
    data = Path(path).read_bytes()
    if len(data) < _DS.size:
        raise SerializationError("dataset file shorter than its header", 0)
    magic, version, _, n, length, channels = _DS.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise SerializationError(f"bad dataset magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported dataset version {version}", 4)
    size = n * length * channels
    if len(data) != _DS.size + 4 * size + 4 * n:
        raise SerializationError("dataset file length does not match its header", _DS.size)
    frames = np.frombuffer(data, "<f4", size, _DS.size).reshape(n, length, channels).astype(np.float32)
    labels = np.frombuffer(data, "<i4", n, _DS.size + 4 * size).astype(np.int32)
    return frames, labels
