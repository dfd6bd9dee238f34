"""Dense CPU kernels with forward and backward passes.

Feature maps are numpy arrays laid out channel-major, ``(C, H, W)``; every
kernel also accepts a leading batch axis ``(N, C, H, W)`` and returns the same
rank it was given. Storage is float32 by default. Dot products and reductions
accumulate in float64 and are cast back to the input dtype, so a float64 input
runs the whole graph in float64 (used by the gradient checker).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-5


def as_batch(x):
    """Return ``(x4, was_single)`` with a batch axis added when missing."""
    x = np.asarray(x)
    if x.ndim == 3:
        x4, single = x[None], True
    elif x.ndim == 4:
        x4, single = x, False
    else:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    if min(x4.shape[1:]) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {x.shape}")
    return x4, single


def _unbatch(y, single):
    return y[0] if single else y


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"batch-norm {name} has length "
                                 f"{len(getattr(self, name))}, expected {n}")
        if np.any(self.running_var <= 0):
            raise ValueError("batch-norm running_var must be > 0")


@dataclass
class ConvParams:
    """One convolution: weights ``(out, in, k, k)`` plus bias or batch-norm."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    bn: Optional[BatchNorm] = None
    activation: str = "leaky"

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"weights must be (out,in,k,k), got {self.weights.shape}")
        if self.kernel not in (1, 3):
            raise ShapeError(f"kernel must be 1 or 3, got {self.kernel}")
        if (self.bias is None) == (self.bn is None):
            raise ValueError("exactly one of bias / bn must be given")
        n = self.bn.gamma.shape[0] if self.bn is not None else self.bias.shape[0]
        if n != self.out_channels:
            raise ShapeError(f"per-channel params have length {n}, "
                             f"expected {self.out_channels}")
        if self.activation not in ("leaky", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]

    def arrays(self):
        """Trainable arrays by name (running statistics are not trainable)."""
        out = {"weights": self.weights}
        if self.bn is not None:
            out["gamma"] = self.bn.gamma
            out["beta"] = self.bn.beta
        else:
            out["bias"] = self.bias
        return out

    def num_params(self):
        per_channel = 4 if self.bn is not None else 1
        return self.weights.size + per_channel * self.out_channels


# -- activations -------------------------------------------------------------

def leaky_relu(x, slope=LEAKY_SLOPE):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return np.where(x > 0, x, x * x.dtype.type(slope))


def backward_leaky_relu(grad_out, x, slope=LEAKY_SLOPE):
    return np.where(np.asarray(x) > 0, grad_out, grad_out * grad_out.dtype.type(slope))


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x64 = x.astype(np.float64)
    e = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.astype(dtype)


def backward_sigmoid(grad_out, y):
    """Gradient given the forward *output* ``y``."""
    return grad_out * y * (1 - y)


# -- convolution -------------------------------------------------------------

def _conv_linear(x4, w):
    """Same-padded stride-1 cross-correlation, float64 result (N, O, H, W)."""
    n, c, h, wd = x4.shape
    o, _, k, _ = w.shape
    w64 = w.astype(np.float64)
    x64 = x4.astype(np.float64)
    if k == 1:
        return np.tensordot(w64[:, :, 0, 0], x64, axes=([1], [1])).transpose(1, 0, 2, 3)
    pad = k // 2
    xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((o, n, h, wd))
    for dy in range(k):
        for dx in range(k):
            out += np.tensordot(w64[:, :, dy, dx], xp[:, :, dy:dy + h, dx:dx + wd],
                                axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def conv2d_forward(x, params: ConvParams):
    """Run a convolution layer; returns ``(y, cache)`` for the backward pass."""
    x4, single = as_batch(x)
    if x4.shape[1] != params.in_channels:
        raise ShapeError(f"conv expects {params.in_channels} input channels, "
                         f"got {x4.shape[1]}")
    dtype = np.result_type(x4.dtype, params.weights.dtype)
    z = _conv_linear(x4, params.weights)
    if params.bn is not None:
        bn = params.bn
        inv_std = 1.0 / np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon)
        xhat = (z - bn.running_mean[:, None, None]) * inv_std[:, None, None]
        pre = bn.gamma.astype(np.float64)[:, None, None] * xhat + bn.beta[:, None, None]
    else:
        xhat, inv_std = None, None
        pre = z + params.bias.astype(np.float64)[:, None, None]
    y = leaky_relu(pre) if params.activation == "leaky" else pre
    cache = {"x": x4, "xhat": xhat, "inv_std": inv_std, "pre": pre,
             "params": params, "single": single}
    return _unbatch(y.astype(dtype), single), cache


def conv2d(x, params: ConvParams):
    return conv2d_forward(x, params)[0]


def backward_conv2d(grad_out, cache):
    """Return ``(grad_input, param_grads)``; param_grads keyed like ``arrays()``."""
    params: ConvParams = cache["params"]
    x4 = cache["x"]
    g4, _ = as_batch(grad_out)
    if g4.shape != cache["pre"].shape:
        raise ShapeError(f"grad_out shape {g4.shape} != forward output "
                         f"{cache['pre'].shape}")
    g = g4.astype(np.float64)
    if params.activation == "leaky":
        g = backward_leaky_relu(g, cache["pre"])
    grads = {}
    if params.bn is not None:
        grads["beta"] = g.sum(axis=(0, 2, 3))
        grads["gamma"] = (g * cache["xhat"]).sum(axis=(0, 2, 3))
        g = g * (params.bn.gamma.astype(np.float64) * cache["inv_std"])[:, None, None]
    else:
        grads["bias"] = g.sum(axis=(0, 2, 3))

    n, c, h, wd = x4.shape
    o, _, k, _ = params.weights.shape
    w64 = params.weights.astype(np.float64)
    x64 = x4.astype(np.float64)
    gw = np.zeros(params.weights.shape)
    if k == 1:
        gw[:, :, 0, 0] = np.tensordot(g, x64, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.tensordot(w64[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
    else:
        pad = k // 2
        xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                xs = xp[:, :, dy:dy + h, dx:dx + wd]
                gw[:, :, dy, dx] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, dy:dy + h, dx:dx + wd] += np.tensordot(
                    w64[:, :, dy, dx], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    grads["weights"] = gw
    dtype = x4.dtype
    return (_unbatch(gx.astype(dtype), cache["single"]),
            {name: arr.astype(params.weights.dtype) for name, arr in grads.items()})


# -- pooling / reshaping -----------------------------------------------------

def maxpool2_forward(x):
    x4, single = as_batch(x)
    n, c, h, w = x4.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = (x4.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h // 2, w // 2, 4))
    # argmax returns the first maximum in (dy, dx) row-major order
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _unbatch(y, single), {"idx": idx, "shape": x4.shape, "single": single}


def maxpool2(x):
    return maxpool2_forward(x)[0]


def backward_maxpool2(grad_out, cache):
    g4, _ = as_batch(grad_out)
    n, c, h, w = cache["shape"]
    if g4.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"grad_out shape {g4.shape} != {(n, c, h // 2, w // 2)}")
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g4.dtype)
    np.put_along_axis(win, cache["idx"][..., None], g4[..., None], axis=-1)
    gx = (win.reshape(n, c, h // 2, w // 2, 2, 2)
          .transpose(0, 1, 2, 4, 3, 5)
          .reshape(n, c, h, w))
    return _unbatch(gx, cache["single"])


def reorg(x, stride=2):
    """Space-to-depth: ``out[c*s*s + dy*s + dx, y, x] = in[c, s*y + dy, s*x + dx]``."""
    x4, single = as_batch(x)
    n, c, h, w = x4.shape
    s = stride
    if h % s or w % s:
        raise ShapeError(f"reorg stride {s} does not divide {h}x{w}")
    y = (x4.reshape(n, c, h // s, s, w // s, s)
         .transpose(0, 1, 3, 5, 2, 4)
         .reshape(n, c * s * s, h // s, w // s))
    return _unbatch(y, single)


def reorg_inverse(x, stride=2):
    x4, single = as_batch(x)
    n, cs, hs, ws = x4.shape
    s = stride
    if cs % (s * s):
        raise ShapeError(f"{cs} channels not divisible by stride^2={s * s}")
    c = cs // (s * s)
    y = (x4.reshape(n, c, s, s, hs, ws)
         .transpose(0, 1, 4, 2, 5, 3)
         .reshape(n, c, hs * s, ws * s))
    return _unbatch(y, single)


def backward_reorg(grad_out, stride=2):
    # reorg is a permutation, so its adjoint is its inverse
    return reorg_inverse(grad_out, stride)


def concat_channels(a, b):
    a4, sa = as_batch(a)
    b4, sb = as_batch(b)
    if sa != sb or a4.shape[0] != b4.shape[0]:
        raise ShapeError("concat operands differ in batch layout")
    if a4.shape[2:] != b4.shape[2:]:
        raise ShapeError(f"concat spatial mismatch: {a4.shape[2:]} vs {b4.shape[2:]}")
    return _unbatch(np.concatenate([a4, b4], axis=1), sa)


def backward_concat_channels(grad_out, channels_a):
    g4, single = as_batch(grad_out)
    return (_unbatch(g4[:, :channels_a], single),
            _unbatch(g4[:, channels_a:], single))
