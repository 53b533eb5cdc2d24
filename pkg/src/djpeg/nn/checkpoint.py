"""Binary checkpoint codec.

Layout (all integers little-endian)::

    b"DJF1" | u16 version | u32 layer count
    per layer:  str kind | str spec-json | u16 tensor count
                per tensor: str name | u8 ndim | u32 dims... | float32 data
    trailer:    str meta-json | u16 array count
                per array:  str name | u8 ndim | u32 dims... | float32 data

``str`` is a u32 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .layers import LayerSpec
from .model import Sequential

MAGIC = b"DJF1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _put_array(buf, name: str, a: np.ndarray) -> None:
    _put_str(buf, name)
    a = np.ascontiguousarray(a, dtype="<f4")
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(a.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self) -> tuple[str, np.ndarray]:
        name = self.str()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return name, a


def dumps(model: Sequential, meta: dict, arrays: dict[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(model.layers)))
    for layer in model.layers:
        _put_str(buf, layer.kind)
        _put_str(buf, json.dumps(layer.spec.to_dict(), sort_keys=True))
        buf.write(struct.pack("<H", len(layer.params)))
        for name, t in layer.params.items():
            _put_array(buf, name, t.data)
    meta = dict(meta, input_shape=list(model.input_shape))
    _put_str(buf, json.dumps(meta, sort_keys=True))
    arrays = arrays or {}
    buf.write(struct.pack("<H", len(arrays)))
    for name in sorted(arrays):
        _put_array(buf, name, arrays[name])
    return buf.getvalue()


def loads(data: bytes) -> tuple[Sequential, dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"unknown checkpoint magic {magic!r}")
    version, nlayers = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    specs, states = [], []
    for _ in range(nlayers):
        kind = r.str()
        spec = LayerSpec.from_dict(json.loads(r.str()))
        if spec.kind != kind:
            raise CheckpointError(f"layer tag {kind!r} disagrees with spec kind {spec.kind!r}")
        (ntensors,) = r.unpack("<H")
        states.append(dict(r.array() for _ in range(ntensors)))
        specs.append(spec)
    meta = json.loads(r.str())
    (narrays,) = r.unpack("<H")
    arrays = dict(r.array() for _ in range(narrays))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")

    model = Sequential.from_specs(specs)
    model.build(tuple(meta["input_shape"]), seed=0, dtype=np.float32)
    for layer, state in zip(model.layers, states):
        for name, value in state.items():
            if name not in layer.params:
                raise CheckpointError(f"{layer.kind}: unexpected tensor {name!r}")
            if layer.params[name].shape != value.shape:
                raise CheckpointError(f"{layer.kind}.{name}: stored shape {value.shape} != {layer.params[name].shape}")
            layer.params[name].data = value
    return model, meta, arrays


def save(path, model: Sequential, meta: dict, arrays=None) -> None:
    Path(path).write_bytes(dumps(model, meta, arrays))


def load(path):
    return loads(Path(path).read_bytes())
