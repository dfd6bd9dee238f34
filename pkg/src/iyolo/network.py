"""Layer specs, shape propagation, and the runtime network (forward/backward)."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as ops
from .errors import ShapeError, SpecValidationError

CLASS_NAMES = ("car", "person", "driver")

# 13x13-grid cell units; five priors because the head has 40 = 5 * (5 + 3) channels
DEFAULT_ANCHORS = ((1.08, 1.19), (3.42, 4.41), (6.63, 11.38), (9.42, 5.11), (16.62, 10.52))

KINDS = ("convolutional", "maxpool", "route", "reorg", "detection")


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    filters: int | None = None
    kernel: int | None = None
    route_sources: tuple = ()
    stride: int = 2  # reorg only
    batch_norm: bool = True  # conv only
    activation: str = "leaky"  # conv only


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    anchors: tuple = DEFAULT_ANCHORS
    num_classes: int = 3
    name: str = "custom"

    @property
    def num_anchors(self):
        return len(self.anchors)

    @property
    def grid_size(self):
        return propagate_shapes(self)[-1][1]

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "convolutional"]

    def with_anchors(self, anchors):
        return replace(self, anchors=tuple(tuple(float(v) for v in a) for a in anchors))


def _conv(i, filters, kernel, bn=True, act="leaky"):
    return LayerSpec(i, "convolutional", filters=filters, kernel=kernel,
                     batch_norm=bn, activation=act)


def _layers_from_rows(rows):
    layers = []
    for i, row in enumerate(rows):
        kind = row[0]
        if kind == "conv":
            layers.append(_conv(i, row[1], row[2]))
        elif kind == "head":
            layers.append(_conv(i, row[1], 1, bn=False, act="linear"))
        elif kind == "maxpool":
            layers.append(LayerSpec(i, "maxpool"))
        elif kind == "route":
            layers.append(LayerSpec(i, "route", route_sources=tuple(row[1])))
        elif kind == "reorg":
            layers.append(LayerSpec(i, "reorg", stride=2))
        elif kind == "detection":
            layers.append(LayerSpec(i, "detection"))
    return tuple(layers)


def iyolo_spec(num_classes=3, anchors=DEFAULT_ANCHORS):
    """The 31-layer, 416x416-input detector with a single 13x13 head."""
    head = len(anchors) * (5 + num_classes)
    rows = [
        ("conv", 32, 3), ("maxpool",),                                   # 0-1
        ("conv", 64, 3), ("maxpool",),                                   # 2-3
        ("conv", 128, 3), ("conv", 64, 1), ("conv", 128, 3), ("maxpool",),  # 4-7
        ("conv", 256, 3), ("conv", 128, 1), ("conv", 256, 3), ("maxpool",),  # 8-11
        ("conv", 512, 3), ("conv", 256, 1), ("conv", 512, 3),            # 12-14
        ("conv", 256, 1), ("conv", 512, 3), ("maxpool",),                # 15-17
        ("conv", 1024, 3), ("conv", 512, 1), ("conv", 1024, 3),          # 18-20
        ("conv", 512, 1), ("conv", 1024, 3), ("conv", 1024, 3),          # 21-23
        ("conv", 1024, 3),                                               # 24
        ("route", [16]), ("reorg",), ("route", [26, 24]),                # 25-27
        ("conv", 1024, 3), ("head", head), ("detection",),               # 28-30
    ]
    spec = NetworkSpec((3, 416, 416), _layers_from_rows(rows),
                       tuple(tuple(a) for a in anchors), num_classes, name="iyolo")
    validate(spec)
    return spec


def tiny_spec(num_classes=3, anchors=None):
    """Desk-scale variant: 64x64 input, widths / 8, one fewer pooling stage, 4x4 grid.

    Keeps the same ladder of 3x3/1x1 convs, the fine-grained route taken at
    the last 2x-resolution stage, reorg, concat and the linear 1x1 head.
    """
    if anchors is None:
        anchors = tuple((w * 4 / 13, h * 4 / 13) for w, h in DEFAULT_ANCHORS)
    head = len(anchors) * (5 + num_classes)
    rows = [
        ("conv", 4, 3), ("maxpool",),                                    # 0-1  64 -> 32
        ("conv", 16, 3), ("conv", 8, 1), ("conv", 16, 3), ("maxpool",),  # 2-5  32 -> 16
        ("conv", 32, 3), ("conv", 16, 1), ("conv", 32, 3), ("maxpool",),  # 6-9  16 -> 8
        ("conv", 64, 3), ("conv", 32, 1), ("conv", 64, 3), ("maxpool",),  # 10-13 8 -> 4
        ("conv", 128, 3), ("conv", 64, 1), ("conv", 128, 3),             # 14-16
        ("route", [12]), ("reorg",), ("route", [18, 16]),                # 17-19
        ("conv", 128, 3), ("head", head), ("detection",),                # 20-22
    ]
    spec = NetworkSpec((3, 64, 64), _layers_from_rows(rows),
                       tuple(tuple(a) for a in anchors), num_classes, name="tiny")
    validate(spec)
    return spec


def probe_spec(kind="composite"):
    """Small graphs (< 5000 parameters) for finite-difference gradient checks."""
    if kind == "linear":
        layers = (_conv(0, 5, 1, bn=False, act="linear"), LayerSpec(1, "detection"))
        return NetworkSpec((3, 4, 4), layers, ((1.0, 1.0),), 0, name="probe-linear")
    if kind != "composite":
        raise ValueError(f"unknown probe {kind!r}")
    anchors = ((0.8, 1.2), (1.5, 0.9))
    rows = [
        ("conv", 4, 3), ("maxpool",),            # 12 -> 6
        ("conv", 4, 3), ("maxpool",),            # 6 -> 3
        ("conv", 8, 3),
        ("route", [2]), ("reorg",), ("route", [6, 4]),
        ("head", len(anchors) * (5 + 2)), ("detection",),
    ]
    spec = NetworkSpec((3, 12, 12), _layers_from_rows(rows), anchors, 2,
                       name="probe-composite")
    validate(spec)
    return spec


def propagate_shapes(spec: NetworkSpec):
    """Output ``(C, H, W)`` of every layer; raises SpecValidationError."""
    shapes = []
    prev = tuple(spec.input_shape)
    for layer in spec.layers:
        c, h, w = prev
        if layer.kind == "convolutional":
            out = (layer.filters, h, w)
        elif layer.kind == "maxpool":
            if h % 2 or w % 2:
                raise SpecValidationError(layer.index, f"maxpool on odd size {h}x{w}")
            out = (c, h // 2, w // 2)
        elif layer.kind == "reorg":
            s = layer.stride
            if h % s or w % s:
                raise SpecValidationError(layer.index, f"reorg stride {s} on {h}x{w}")
            out = (c * s * s, h // s, w // s)
        elif layer.kind == "route":
            srcs = [shapes[j] for j in layer.route_sources]
            if any(s[1:] != srcs[0][1:] for s in srcs):
                raise SpecValidationError(layer.index, "route sources differ spatially")
            out = (sum(s[0] for s in srcs),) + srcs[0][1:]
        else:
            out = prev
        shapes.append(out)
        prev = out
    return shapes


def validate(spec: NetworkSpec):
    layers = spec.layers
    if not layers:
        raise SpecValidationError(0, "empty layer list")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecValidationError(0, f"bad input shape {spec.input_shape}")
    for pos, layer in enumerate(layers):
        if layer.index != pos:
            raise SpecValidationError(layer.index, f"index not contiguous (position {pos})")
        if layer.kind not in KINDS:
            raise SpecValidationError(pos, f"unknown kind {layer.kind!r}")
        if layer.kind == "convolutional":
            if not layer.filters or layer.filters < 1:
                raise SpecValidationError(pos, "conv needs filters >= 1")
            if layer.kernel not in (1, 3):
                raise SpecValidationError(pos, f"kernel {layer.kernel} not in {{1, 3}}")
        if layer.kind == "route":
            if not layer.route_sources:
                raise SpecValidationError(pos, "route without sources")
            for src in layer.route_sources:
                if not 0 <= src < pos:
                    raise SpecValidationError(
                        pos, f"route source {src} is not a strictly earlier layer")
        if layer.kind == "detection" and pos != len(layers) - 1:
            raise SpecValidationError(pos, "detection must be the last layer")
    if layers[-1].kind != "detection":
        raise SpecValidationError(layers[-1].index, "last layer must be detection")
    convs = spec.conv_layers()
    expected = spec.num_anchors * (5 + spec.num_classes)
    if not convs or layers[-2].kind != "convolutional":
        raise SpecValidationError(len(layers) - 1, "detection must follow a conv layer")
    if layers[-2].filters != expected:
        raise SpecValidationError(
            layers[-2].index,
            f"head has {layers[-2].filters} filters, expected "
            f"{spec.num_anchors} x (5 + {spec.num_classes}) = {expected}")
    propagate_shapes(spec)
    return spec


@dataclass
class Network:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)  # layer index -> ConvParams
    _cache: list | None = field(default=None, repr=False)

    def num_params(self):
        return sum(p.num_params() for p in self.params.values())

    def parameters(self):
        """Trainable arrays keyed by ``(layer_index, name)``, in layer order."""
        out = {}
        for idx in sorted(self.params):
            for name, arr in self.params[idx].arrays().items():
                out[(idx, name)] = arr
        return out

    def copy(self):
        return Network(self.spec, copy.deepcopy(self.params))

    def forward(self, x, train=False):
        """Raw head output; ``train=True`` keeps activations for ``backward``."""
        x = np.asarray(x)
        want = tuple(self.spec.input_shape)
        if x.shape[-3:] != want or x.ndim not in (3, 4):
            raise ShapeError(f"network expects input {want}, got {x.shape}")
        return self._run(x, train=train)

    def _run(self, x, train=False, outputs=None):
        dtype = next(iter(self.params.values())).weights.dtype
        x4, single = ops.as_batch(np.asarray(x, dtype=np.result_type(x.dtype, dtype)))
        if outputs is None:
            outputs = []
        cache = []
        prev = x4
        for layer in self.spec.layers:
            entry = None
            if layer.kind == "convolutional":
                y, entry = ops.conv2d_forward(prev, self.params[layer.index])
            elif layer.kind == "maxpool":
                y, entry = ops.maxpool2_forward(prev)
            elif layer.kind == "reorg":
                y = ops.reorg(prev, layer.stride)
            elif layer.kind == "route":
                srcs = [outputs[j] for j in layer.route_sources]
                y = srcs[0].copy() if len(srcs) == 1 else np.concatenate(srcs, axis=1)
            else:
                y = prev
            outputs.append(y)
            cache.append(entry)
            prev = y
        if train:
            self._cache = cache
            self._outputs_channels = [o.shape[1] for o in outputs]
        else:
            self._cache = None
        return prev[0] if single else prev

    def layer_outputs(self, x):
        """Every layer's output for a single image (used for conformance checks)."""
        outputs = []
        self._run(np.asarray(x), outputs=outputs)
        return [o[0] for o in outputs]

    def backward(self, grad_out):
        """Backpropagate ``d loss / d output``; returns ``(grad_input, grads)``.

        ``grads`` maps ``(layer_index, name)`` to arrays shaped like
        ``parameters()``. Requires a preceding ``forward(..., train=True)``.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a forward(train=True) first")
        g4, single = ops.as_batch(np.asarray(grad_out))
        layers = self.spec.layers
        pending = [None] * len(layers)
        pending[-1] = g4
        grads = {}
        grad_input = None

        def push(j, g):
            pending[j] = g if pending[j] is None else pending[j] + g

        for layer in reversed(layers):
            i = layer.index
            g = pending[i]
            pending[i] = None
            if g is None:
                continue
            entry = self._cache[i]
            if layer.kind == "convolutional":
                gx, pg = ops.backward_conv2d(g, entry)
                for name, arr in pg.items():
                    grads[(i, name)] = arr
            elif layer.kind == "maxpool":
                gx = ops.backward_maxpool2(g, entry)
            elif layer.kind == "reorg":
                gx = ops.backward_reorg(g, layer.stride)
            elif layer.kind == "route":
                start = 0
                for j in layer.route_sources:
                    c = self._outputs_channels[j]
                    push(j, g[:, start:start + c])
                    start += c
                continue
            else:
                gx = g
            if i == 0:
                grad_input = gx
            else:
                push(i - 1, gx)
        for key, arr in self.parameters().items():
            grads.setdefault(key, np.zeros_like(arr))
        if grad_input is not None and single:
            grad_input = grad_input[0]
        return grad_input, {k: grads[k] for k in self.parameters()}


def build(spec: NetworkSpec, seed=0, dtype=np.float32):
    """Allocate parameters with seeded uniform fan-in initialisation."""
    validate(spec)
    rng = np.random.default_rng(seed)
    shapes = propagate_shapes(spec)
    params = {}
    for layer in spec.layers:
        if layer.kind != "convolutional":
            continue
        cin = shapes[layer.index - 1][0] if layer.index > 0 else spec.input_shape[0]
        k = layer.kernel
        bound = np.sqrt(2.0 / (cin * k * k))
        w = rng.random((layer.filters, cin, k, k), dtype=np.float32)
        w = ((w * 2 - 1) * np.float32(bound)).astype(dtype)
        n = layer.filters
        if layer.batch_norm:
            bn = ops.BatchNorm(np.ones(n, dtype), np.zeros(n, dtype),
                               np.zeros(n, dtype), np.ones(n, dtype))
            params[layer.index] = ops.ConvParams(w, bn=bn, activation=layer.activation)
        else:
            params[layer.index] = ops.ConvParams(w, bias=np.zeros(n, dtype),
                                                 activation=layer.activation)
    return Network(spec, params)


def count_params(spec: NetworkSpec):
    """Parameter count (including batch-norm statistics) without allocating."""
    shapes = propagate_shapes(spec)
    total = 0
    for layer in spec.conv_layers():
        cin = shapes[layer.index - 1][0] if layer.index else spec.input_shape[0]
        total += layer.filters * cin * layer.kernel ** 2
        total += layer.filters * (4 if layer.batch_norm else 1)
    return total


def layer_table(spec: NetworkSpec):
    """Rows of (number, layer, filters, size, output) in the printed-table style."""
    shapes = propagate_shapes(spec)
    rows = []
    for layer, (c, h, w) in zip(spec.layers, shapes):
        if layer.kind == "convolutional":
            rows.append((layer.index, layer.kind, str(layer.filters),
                         f"{layer.kernel}*{layer.kernel}/1", f"{h}*{w}", c))
        elif layer.kind == "maxpool":
            rows.append((layer.index, layer.kind, "", "2*2/2", f"{h}*{w}", c))
        else:
            rows.append((layer.index, layer.kind, "", "", f"{h}*{w}", c))
    return rows
