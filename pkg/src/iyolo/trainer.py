"""Desk-scale training loop, synthetic data and finite-difference gradient checks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, GroundTruth, decode_arrays, iou_matrix
from .errors import TrainingDivergedError
from .formats import write_csv
from .loss import LossWeights, LsrConfig, detection_loss
from .mining import MiningConfig, ohem_select
from .network import Network, build, probe_spec, tiny_spec

log = logging.getLogger(__name__)

CLASS_COLORS = np.array([[0.9, 0.15, 0.15], [0.15, 0.9, 0.15], [0.15, 0.15, 0.9]])
DIVERGENCE_LIMIT = 1e6
HISTORY_COLUMNS = ("iter", "total", "coord", "obj", "noobj", "class")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    gts: list


def synth_dataset(seed, n_images, size=64, noise=0.05, max_objects=3, grid=4):
    """Images of 1-3 non-overlapping filled rectangles, one colour per class.

    Rectangle centers never sit exactly on a line of the ``grid`` x ``grid``
    detection lattice, where the cell-offset regression target is undefined.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = math.ceil(0.15 * size), size // 2
    out = []
    for _ in range(n_images):
        img = rng.uniform(0.0, noise, size=(3, size, size))
        placed = []
        gts = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(100):
                w, h = rng.integers(lo, hi + 1, size=2)
                x1 = int(rng.integers(0, size - w + 1))
                y1 = int(rng.integers(0, size - h + 1))
                rect = (x1, y1, x1 + int(w), y1 + int(h))
                on_line = any(((rect[i] + rect[i + 2]) * grid) % (2 * size) == 0 for i in (0, 1))
                if not on_line and all(rect[2] <= p[0] or p[2] <= rect[0] or rect[3] <= p[1] or p[3] <= rect[1]
                       for p in placed):
                    break
            else:
                continue
            cls = int(rng.integers(0, 3))
            placed.append(rect)
            x1, y1, x2, y2 = rect
            img[:, y1:y2, x1:x2] += CLASS_COLORS[cls][:, None, None] - noise
            gts.append(GroundTruth(cls, Box(x1 / size, y1 / size, x2 / size, y2 / size)))
        out.append(Sample(np.clip(img, 0, 1).astype(np.float32), gts))
    return out


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    momentum: float = 0.9
    ohem_enabled: bool = True
    mining: MiningConfig = field(default_factory=MiningConfig)
    lsr: LsrConfig = field(default_factory=LsrConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    track_contributions: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LossRecord:
    iteration: int
    total: float
    coord: float
    obj: float
    noobj: float
    cls: float


@dataclass
class LossHistory:
    records: list = field(default_factory=list)
    # images with a nonzero parameter gradient, per step (only when tracked)
    contributors: list = field(default_factory=list)

    def totals(self):
        return np.array([r.total for r in self.records])

    def smoothed(self, window=20):
        t = self.totals()
        return float(t[:window].mean()), float(t[-window:].mean())

    def rows(self):
        return [(r.iteration, r.total, r.coord, r.obj, r.noobj, r.cls) for r in self.records]

    def to_csv(self, path):
        write_csv(path, HISTORY_COLUMNS, self.rows())


def sgd_step(params, grads, lr, momentum, velocity):
    """In-place momentum update: ``v = m*v - lr*g``; ``theta += v``."""
    for key, theta in params.items():
        g = grads[key]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, expected {theta.shape}")
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(theta)
        v *= theta.dtype.type(momentum)
        v -= theta.dtype.type(lr) * g.astype(theta.dtype)
        theta += v
    return velocity


def _batches(rng, n, batch_size):
    if batch_size >= n:
        while True:
            yield np.arange(n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def per_image_grad_norms(net: Network, d_raw):
    """Parameter-gradient norm contributed by each image of the cached batch."""
    norms = []
    for i in range(d_raw.shape[0]):
        only = np.zeros_like(d_raw)
        only[i] = d_raw[i]
        _, grads = net.backward(only)
        norms.append(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                   for g in grads.values())))
    return norms


def train(cfg: TrainConfig, dataset, spec=None, net=None):
    """Run SGD with optional hard-example masking; returns ``(net, history)``.

    Each step computes every image's loss, keeps gradients only for the
    hardest ``hard_ratio`` of the batch when OHEM is on, and averages over
    the batch size. History rows are batch means over all images, so runs
    with and without OHEM are directly comparable.
    """
    if net is None:
        net = build(spec or tiny_spec(), seed=cfg.seed)
    spec = net.spec
    images = np.stack([s.image for s in dataset]).astype(np.float32)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(rng, len(dataset), cfg.batch_size)
    params = net.parameters()
    velocity = {}
    history = LossHistory()
    for it in range(cfg.iterations):
        idx = next(batches)
        raw = net.forward(images[idx], train=True)
        n = len(idx)
        parts = []
        grads_raw = []
        for j, i in enumerate(idx):
            bd, g = detection_loss(raw[j], dataset[i].gts, spec.anchors, cfg.weights,
                                   cfg.lsr, with_grad=True)
            parts.append(bd)
            grads_raw.append(g)
        totals = [bd.total for bd in parts]
        mean = LossRecord(it, *(float(np.mean([getattr(bd, f) for bd in parts]))
                                for f in ("total", "coord_loss", "obj_loss",
                                          "noobj_loss", "class_loss")))
        if not math.isfinite(mean.total) or mean.total > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(
                f"loss {mean.total} at iteration {it} (limit {DIVERGENCE_LIMIT:g})")
        history.records.append(mean)
        keep = ohem_select(totals, cfg.mining) if cfg.ohem_enabled else range(n)
        d_raw = np.zeros_like(raw)
        for j in keep:
            d_raw[j] = grads_raw[j] / n
        if cfg.track_contributions:
            history.contributors.append(
                sum(v > 0 for v in per_image_grad_norms(net, d_raw)))
        _, grads = net.backward(d_raw)
        sgd_step(params, grads, cfg.learning_rate, cfg.momentum, velocity)
        if it % 50 == 0:
            log.debug("iter %d loss %.4f", it, mean.total)
    return net, history


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped_kinks: int

    def passed(self, tol=1e-3):
        return self.max_relative_error <= tol


def _switch_state(net: Network):
    """Bytes identifying the active piece of every piecewise-linear op."""
    parts = []
    for entry in net._cache:
        if entry is None:
            continue
        if "idx" in entry:
            parts.append(entry["idx"].tobytes())
        elif entry["params"].activation == "leaky":
            parts.append((entry["pre"] > 0).tobytes())
    return b"".join(parts)


def relative_error(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(net: Network, x, loss_fn, seed=0, fraction=0.05, h=1e-3):
    """Compare backprop against central differences on a random parameter sample.

    ``loss_fn(raw) -> (loss, d_loss/d_raw, switch_bytes)``. The network
    should hold float64 parameters. A sampled parameter whose +-h
    perturbation flips a leaky/max-pool/loss-assignment branch is not
    differentiable at that step size; it is replaced by another draw.
    """
    x = np.asarray(x, dtype=np.float64)
    raw = net.forward(x, train=True)
    _, g_raw, base_loss_state = loss_fn(raw)
    base_state = _switch_state(net) + base_loss_state
    _, grads = net.backward(g_raw)
    params = net.parameters()
    keys = list(params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    want = max(1, math.ceil(fraction * total))
    rng = np.random.default_rng(seed)
    pool = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def probe(flat):
        ki = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[ki]
        arr = params[key].reshape(-1)
        pos = flat - offsets[ki]
        old = arr[pos]
        vals = []
        for sign in (1, -1):
            arr[pos] = old + sign * h
            out = net.forward(x, train=True)
            loss, _, loss_state = loss_fn(out)
            vals.append((loss, _switch_state(net) + loss_state))
        arr[pos] = old
        numeric = (vals[0][0] - vals[1][0]) / (2 * h)
        smooth = vals[0][1] == base_state and vals[1][1] == base_state
        return float(grads[key].reshape(-1)[pos]), numeric, smooth

    worst, checked, skipped = 0.0, 0, 0
    for flat in pool:
        if checked >= want:
            break
        analytic, numeric, smooth = probe(int(flat))
        if not smooth:
            skipped += 1
            continue
        worst = max(worst, relative_error(analytic, numeric))
        checked += 1
    net.forward(x)
    return GradCheckResult(worst, checked, skipped)


def squared_loss_fn(target):
    target = np.asarray(target, dtype=np.float64)

    def fn(raw):
        diff = raw - target
        return float(np.sum(diff ** 2)), 2 * diff, b""
    return fn


def detection_loss_fn(gts, anchors, weights=LossWeights(), cfg=None, flip_sign=False):
    """Adapter for ``grad_check``; ``flip_sign`` corrupts the gradient (negative control)."""
    def fn(raw):
        num_classes = raw.shape[-3] // len(anchors) - 5
        lsr = cfg or LsrConfig(0.1, num_classes)
        parts, grads, states = 0.0, [], []
        batch = raw if raw.ndim == 4 else raw[None]
        for i in range(batch.shape[0]):
            bd, g = detection_loss(batch[i], gts[i], anchors, weights, lsr, with_grad=True)
            parts += bd.total
            grads.append(g)
            states.append(_loss_state(batch[i], gts[i], anchors))
        g = np.stack(grads).reshape(raw.shape)
        return parts, (-g if flip_sign else g), b"".join(states)
    return fn


def _loss_state(raw, gts, anchors):
    if not gts:
        return b""
    d = decode_arrays(raw, anchors)
    s = d["bx"].shape[-1]
    corners = np.stack([d["bx"] - d["bw"] / 2, d["by"] - d["bh"] / 2,
                        d["bx"] + d["bw"] / 2, d["by"] + d["bh"] / 2], axis=-1)
    best = iou_matrix(corners.reshape(-1, 4), np.array([g.box.as_array() for g in gts]) * s)
    return (best.max(axis=1) > 0.5).tobytes()


def probe_instance(seed, kind="composite", flip_sign=False):
    """Float64 probe network, input batch and loss adapter for ``grad_check``.

    ``flip_sign`` negates the composite probe's loss gradient (negative control).
    """
    spec = probe_spec(kind)
    net = build(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 10_000)
    if kind == "linear":
        x = rng.uniform(-1, 1, size=(2,) + tuple(spec.input_shape))
        target = rng.normal(size=(2, spec.layers[0].filters) + tuple(spec.input_shape[1:]))
        return net, x, squared_loss_fn(target)
    for p in net.params.values():
        if p.bn is not None:
            p.bn.gamma[:] = rng.uniform(0.5, 1.5, p.bn.gamma.shape)
            p.bn.beta[:] = rng.uniform(-0.2, 0.2, p.bn.beta.shape)
            p.bn.running_mean[:] = rng.uniform(-0.1, 0.1, p.bn.gamma.shape)
            p.bn.running_var[:] = rng.uniform(0.5, 2.0, p.bn.gamma.shape)
    x = rng.uniform(0, 1, size=(2,) + tuple(spec.input_shape))
    gts = []
    for _ in range(2):
        items = []
        for _ in range(int(rng.integers(1, 3))):
            cx, cy = rng.uniform(0.15, 0.85, size=2)
            w, h = rng.uniform(0.15, 0.5, size=2)
            items.append(GroundTruth(int(rng.integers(0, spec.num_classes)),
                                     Box.from_center(cx, cy, w, h).clipped()))
        gts.append(items)
    return net, x, detection_loss_fn(gts, spec.anchors, flip_sign=flip_sign)
