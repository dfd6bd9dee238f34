"""Label-smoothed classification losses and the composite detection loss.

Class indices are 0-based throughout (``y`` in ``range(K)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import encode, iou_matrix, decode_arrays, shape_iou, split_raw
from .tensor_ops import sigmoid

P_FLOOR = 1e-12


@dataclass(frozen=True)
class LsrConfig:
    epsilon: float = 0.1
    num_classes: int = 3

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    obj: float = 5.0
    noobj: float = 1.0
    class_w: float = 1.0
    coord: float = 1.0

    def __post_init__(self):
        if min(self.obj, self.noobj, self.class_w, self.coord) < 0:
            raise ValueError("loss weights must be >= 0")

    def combine(self, coord, obj, noobj, cls):
        return self.coord * coord + self.obj * obj + self.noobj * noobj + self.class_w * cls


@dataclass
class LossBreakdown:
    coord_loss: float
    obj_loss: float
    noobj_loss: float
    class_loss: float
    total: float
    positives: int = 0
    ignored: int = 0
    negatives: int = 0


def _check_label(num_classes, y):
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} out of range for {num_classes} classes")


def hard_target(num_classes, y):
    _check_label(num_classes, y)
    q = np.zeros(num_classes)
    q[y] = 1.0
    return q


def lsr_target(cfg: LsrConfig, y):
    """Smoothed target: ``eps/K`` off the label, ``1 - eps + eps/K`` on it."""
    _check_label(cfg.num_classes, y)
    k = cfg.num_classes
    q = np.full(k, cfg.epsilon / k)
    q[y] = 1.0 - cfg.epsilon + cfg.epsilon / k
    return q


def cross_entropy(p, q):
    p = np.maximum(np.asarray(p, dtype=np.float64), P_FLOOR)
    return float(-np.sum(np.log(p) * np.asarray(q, dtype=np.float64)))


def lsr_loss(p, y, cfg: LsrConfig):
    """``-(1 - eps) log p(y) - (eps / K) * sum_k log p(k)``, evaluated directly."""
    _check_label(cfg.num_classes, y)
    logp = np.log(np.maximum(np.asarray(p, dtype=np.float64), P_FLOOR))
    eps, k = cfg.epsilon, cfg.num_classes
    return float(-(1 - eps) * logp[y] - eps / k * logp.sum())


def _softplus(x):
    return np.logaddexp(0.0, x)


def assign_targets(gts, anchors, grid_size):
    """Responsible ``(anchor, cell_y, cell_x)`` and encoded targets for each gt.

    The responsible cell contains the gt center; the anchor is the prior
    whose shape overlaps the gt best when both are centered. When two gts
    map to the same slot the first one keeps it.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    s = grid_size
    slots = {}
    for gi, gt in enumerate(gts):
        cx, cy = gt.box.center
        w, h = gt.box.size
        if not (0 <= cx <= 1 and 0 <= cy <= 1):
            raise ValueError(f"ground truth {gi} has center ({cx}, {cy}) outside the image")
        if w <= 0 or h <= 0:
            raise ValueError(f"ground truth {gi} has non-positive size")
        gx, gy, gw, gh = cx * s, cy * s, w * s, h * s
        cell_x, cell_y = min(int(gx), s - 1), min(int(gy), s - 1)
        a = int(np.argmax(shape_iou(gw, gh, anchors[:, 0], anchors[:, 1])))
        key = (a, cell_y, cell_x)
        if key in slots:
            continue
        slots[key] = (gi, encode((gx, gy, gw, gh), (cell_x, cell_y), anchors[a]))
    return slots


def detection_loss(raw, gts, anchors, weights: LossWeights = LossWeights(),
                   cfg: LsrConfig = LsrConfig(), ignore_threshold=0.5, with_grad=False):
    """Composite loss of one image's raw head ``(A*(5+K), S, S)``.

    Returns a LossBreakdown, or ``(LossBreakdown, d total / d raw)`` when
    ``with_grad`` is set.
    """
    raw = np.asarray(raw)
    anchors = np.asarray(anchors, dtype=np.float64)
    r = split_raw(raw, len(anchors)).astype(np.float64)
    num_a, depth, s, _ = r.shape
    k = depth - 5
    if k != cfg.num_classes:
        raise ValueError(f"head has {k} classes, LSR config has {cfg.num_classes}")
    slots = assign_targets(gts, anchors, s)

    pos = np.zeros((num_a, s, s), dtype=bool)
    t_target = np.zeros((num_a, 4, s, s))
    q_target = np.zeros((num_a, k, s, s))
    for (a, y, x), (gi, t) in slots.items():
        pos[a, y, x] = True
        t_target[a, :, y, x] = t
        q_target[a, :, y, x] = lsr_target(cfg, gts[gi].class_id)

    d = decode_arrays(raw, anchors)
    ignore = np.zeros_like(pos)
    if gts:
        pred_corners = np.stack([d["bx"] - d["bw"] / 2, d["by"] - d["bh"] / 2,
                                 d["bx"] + d["bw"] / 2, d["by"] + d["bh"] / 2], axis=-1)
        gt_corners = np.array([g.box.as_array() for g in gts]) * s
        best = iou_matrix(pred_corners.reshape(-1, 4), gt_corners).max(axis=1)
        ignore = (best.reshape(num_a, s, s) > ignore_threshold) & ~pos
    neg = ~pos & ~ignore

    t = r[:, :4]
    obj_logit = r[:, 4]
    cls_logit = r[:, 5:]
    posm = pos[:, None]

    coord_err = np.where(posm, t - t_target, 0.0)
    coord_loss = float(np.sum(coord_err ** 2))
    obj_loss = float(np.sum(_softplus(-obj_logit[pos])))
    noobj_loss = float(np.sum(_softplus(obj_logit[neg])))
    cls_terms = _softplus(cls_logit) - q_target * cls_logit
    class_loss = float(np.sum(np.where(posm, cls_terms, 0.0)))
    total = weights.combine(coord_loss, obj_loss, noobj_loss, class_loss)
    out = LossBreakdown(coord_loss, obj_loss, noobj_loss, class_loss, total,
                        int(pos.sum()), int(ignore.sum()), int(neg.sum()))
    if not with_grad:
        return out

    grad = np.zeros_like(r)
    grad[:, :4] = weights.coord * 2 * coord_err
    sig_obj = sigmoid(obj_logit)
    grad[:, 4] = np.where(pos, weights.obj * (sig_obj - 1), 0.0)
    grad[:, 4] += np.where(neg, weights.noobj * sig_obj, 0.0)
    grad[:, 5:] = np.where(posm, weights.class_w * (sigmoid(cls_logit) - q_target), 0.0)
    return out, grad.reshape(raw.shape).astype(raw.dtype)
