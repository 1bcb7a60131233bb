"""Flat binary checkpoint format for FCAE models.

Layout (all integers little-endian u32 unless noted):

    magic   b"FCAE\x01"
    version u32
    input shape: c, h, w
    encoder descriptor count, then per descriptor:
        kind u8 (0=conv, 1=pool), ksize, filters, pad
    parametrized layer count, then per layer:
        kind tag u8 (0=conv, 1=deconv, 2=batchnorm)
        array count u8, then per array:
            ndim u8, dims u32[ndim], raw little-endian float32 data

Round-trips are bit-exact: arrays are written as raw float32 bytes.
"""
import struct

import numpy as np

from .errors import ParseError
from .layers import BatchNorm, Conv2D, Deconv2D
from .network import FcaeModel, LayerDesc, NetworkSpec

MAGIC = b"FCAE\x01"
VERSION = 1
_KIND_TAGS = {Conv2D: 0, Deconv2D: 1, BatchNorm: 2}


def _layer_arrays(layer):
    if isinstance(layer, BatchNorm):
        return [layer.params["gamma"], layer.params["beta"],
                layer.running_mean, layer.running_var]
    return [layer.params["weight"], layer.params["bias"]]


def _write_array(f, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_array(f):
    ndim = _read(f, "<B")[0]
    shape = _read(f, f"<{ndim}I") if ndim else ()
    n = int(np.prod(shape)) if shape else 1
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise ParseError(f"truncated checkpoint at offset {f.tell()}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _read(f, fmt):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise ParseError(f"truncated checkpoint at offset {f.tell()}")
    return struct.unpack(fmt, raw)


def save_checkpoint(model, path):
    layers = [layer for _, layer in model._layers()
              if type(layer) in _KIND_TAGS]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<3I", *model.spec.input_shape))
        f.write(struct.pack("<I", len(model.spec.encoder)))
        for d in model.spec.encoder:
            kind = 0 if d.kind == "conv" else 1
            f.write(struct.pack("<B3I", kind, d.ksize, d.filters, d.pad))
        f.write(struct.pack("<I", len(layers)))
        for layer in layers:
            f.write(struct.pack("<B", _KIND_TAGS[type(layer)]))
            arrays = _layer_arrays(layer)
            f.write(struct.pack("<B", len(arrays)))
            for arr in arrays:
                _write_array(f, arr)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ParseError(f"{path}: bad magic at offset 0")
        version = _read(f, "<I")[0]
        if version != VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        input_shape = _read(f, "<3I")
        n_desc = _read(f, "<I")[0]
        descs = []
        for _ in range(n_desc):
            kind, ksize, filters, pad = _read(f, "<B3I")
            if kind == 0:
                descs.append(LayerDesc("conv", ksize, filters, pad))
            else:
                descs.append(LayerDesc("pool"))
        spec = NetworkSpec(tuple(input_shape), tuple(descs))
        model = FcaeModel(spec, seed=0)
        layers = [layer for _, layer in model._layers()
                  if type(layer) in _KIND_TAGS]
        n_layers = _read(f, "<I")[0]
        if n_layers != len(layers):
            raise ParseError(
                f"{path}: checkpoint has {n_layers} layers, spec builds {len(layers)}")
        for layer in layers:
            tag, n_arr = _read(f, "<BB")
            if tag != _KIND_TAGS[type(layer)]:
                raise ParseError(f"{path}: layer kind mismatch at offset {f.tell()}")
            targets = _layer_arrays(layer)
            if n_arr != len(targets):
                raise ParseError(f"{path}: array count mismatch at offset {f.tell()}")
            for tgt in targets:
                arr = _read_array(f)
                if arr.shape != tgt.shape:
                    raise ParseError(
                        f"{path}: array shape {arr.shape} != expected {tgt.shape}")
                tgt[...] = arr
        if f.read(1):
            raise ParseError(f"{path}: trailing bytes at offset {f.tell()}")
    return model
