"""Bit-exact binary checkpoints for models and standalone tensors.

Layout (little-endian)::

    b"PFCK"  u32 version  u32 tensor_count
    per tensor: u16 name_length, UTF-8 name, u32 ndim, u32 dims[ndim], f64 data
"""

import struct
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np

from .errors import CheckpointFormatError, ShapeError, TruncatedStreamError
from .model import LayerSpec, Model
from .tensor import Tensor

MAGIC = b"PFCK"
VERSION = 1


def encode_tensors(tensors: Dict[str, Tensor]) -> bytes:
    """Serialise named tensors in insertion order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a byte string that refuses to read past the end."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedStreamError(
                f"stream ended while reading {what}: needed {count} bytes at offset "
                f"{self.offset}, only {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(data: bytes) -> Dict[str, Tensor]:
    """Inverse of ``encode_tensors``."""
    reader = _Reader(bytes(data))
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")

    tensors: Dict[str, Tensor] = {}
    for index in range(count):
        (name_length,) = reader.unpack("<H", f"name length of tensor {index}")
        name = reader.take(name_length, f"name of tensor {index}").decode("utf-8")
        (ndim,) = reader.unpack("<I", f"rank of '{name}'")
        dims = reader.unpack(f"<{ndim}I", f"dims of '{name}'")
        size = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(8 * size, f"data of '{name}'")
        tensors[name] = Tensor.wrap(np.frombuffer(raw, dtype="<f8").reshape(dims))
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(
            f"{len(reader.data) - reader.offset} trailing bytes after {count} tensors"
        )
    return tensors


def save(model: Model) -> bytes:
    """Checkpoint bytes for every model parameter."""
    return encode_tensors(model.params)


def load(data: bytes, specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> Model:
    """Rebuild a model from checkpoint bytes and its spec chain."""
    tensors = decode_tensors(data)
    # the constructor names any missing or mis-shaped tensor
    model = Model(specs, input_shape, tensors)
    extra = sorted(set(tensors) - set(model.params))
    if extra:
        raise ShapeError(f"checkpoint holds tensors the spec chain does not: {extra}")
    return model


def save_file(model: Model, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(save(model))


def load_file(path: Union[str, Path], specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> Model:
    return load(Path(path).read_bytes(), specs, input_shape)
