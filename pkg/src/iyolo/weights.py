"""IYW1 binary weight files (little-endian).

Layout::

    b"IYW1"  u32 version=1  u32 num_classes  u32 anchor_count
    f32[2 * anchor_count] anchors
    u32 conv_layer_count
    per conv layer, in index order:
        u32 layer_index  u8 has_bn
        has_bn: f32[out] gamma, beta, running_mean, running_var
        else:   f32[out] bias
        f32[out * in * k * k] weights (row-major)
"""
from __future__ import annotations

import struct

import numpy as np

from . import tensor_ops as ops
from .errors import (BadMagicError, SpecMismatchError, TruncatedFileError,
                     UnsupportedVersionError)
from .network import Network, NetworkSpec, propagate_shapes, validate

MAGIC = b"IYW1"
VERSION = 1


def save_weights(net: Network, path):
    spec = net.spec
    parts = [MAGIC, struct.pack("<III", VERSION, spec.num_classes, spec.num_anchors),
             np.asarray(spec.anchors, dtype="<f4").tobytes(),
             struct.pack("<I", len(net.params))]
    for idx in sorted(net.params):
        p = net.params[idx]
        parts.append(struct.pack("<IB", idx, 1 if p.bn is not None else 0))
        if p.bn is not None:
            for arr in (p.bn.gamma, p.bn.beta, p.bn.running_mean, p.bn.running_var):
                parts.append(np.asarray(arr, dtype="<f4").tobytes())
        else:
            parts.append(np.asarray(p.bias, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(self.pos, self.pos + n, len(self.data))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]

    def f32(self, n):
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def read_header(data):
    """Parse magic/version/classes/anchors; returns ``(header dict, reader)``."""
    r = _Reader(data)
    magic = r.take(4) if len(data) >= 4 else None
    if magic != MAGIC:
        raise BadMagicError(0, f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    at = r.pos
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(at, f"unsupported version {version}")
    num_classes = r.u32()
    count = r.u32()
    anchors = r.f32(2 * count).reshape(count, 2)
    at = r.pos
    layers = r.u32()
    header = {"num_classes": num_classes, "anchors": anchors,
              "conv_layers": layers, "conv_layers_offset": at}
    return header, r


def read_weights_header(path):
    with open(path, "rb") as fh:
        header, _ = read_header(fh.read())
    return header


def load_weights(spec: NetworkSpec, path) -> Network:
    """Load a network for ``spec``; anchors are taken from the file."""
    with open(path, "rb") as fh:
        data = fh.read()
    header, r = read_header(data)
    if header["num_classes"] != spec.num_classes:
        raise SpecMismatchError(8, f"file has {header['num_classes']} classes, "
                                   f"spec expects {spec.num_classes}")
    if len(header["anchors"]) != spec.num_anchors:
        raise SpecMismatchError(12, f"file has {len(header['anchors'])} anchors, "
                                    f"spec expects {spec.num_anchors}")
    convs = spec.conv_layers()
    if header["conv_layers"] != len(convs):
        raise SpecMismatchError(header["conv_layers_offset"],
                                f"file has {header['conv_layers']} conv layers, "
                                f"spec expects {len(convs)}")
    spec = spec.with_anchors(header["anchors"].tolist())
    validate(spec)
    shapes = propagate_shapes(spec)
    params = {}
    for layer in convs:
        at = r.pos
        idx = r.u32()
        if idx != layer.index:
            raise SpecMismatchError(at, f"expected conv layer {layer.index}, found {idx}")
        at = r.pos
        has_bn = r.u8()
        if bool(has_bn) != layer.batch_norm:
            raise SpecMismatchError(at, f"layer {idx}: has_bn={has_bn} disagrees with spec")
        n = layer.filters
        cin = shapes[idx - 1][0] if idx > 0 else spec.input_shape[0]
        k = layer.kernel
        if has_bn:
            gamma, beta, mean, var = (r.f32(n) for _ in range(4))
            if np.any(var <= 0):
                raise SpecMismatchError(r.pos - 4 * n, f"layer {idx}: running_var <= 0")
            bn = ops.BatchNorm(gamma, beta, mean, var)
            bias = None
        else:
            bn, bias = None, r.f32(n)
        w = r.f32(n * cin * k * k).reshape(n, cin, k, k)
        params[idx] = ops.ConvParams(w, bias=bias, bn=bn, activation=layer.activation)
    if r.pos != len(data):
        raise SpecMismatchError(r.pos, f"{len(data) - r.pos} trailing bytes after last layer")
    return Network(spec, params)
