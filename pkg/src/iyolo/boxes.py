"""Box geometry: grid decoding/encoding, IoU, NMS and objectness targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor_ops import sigmoid

ENCODE_EPS = 1e-6
# keeps decoded offsets and probabilities strictly inside (0, 1) in float64
PROB_EPS = 1e-12
MAX_LOG_SCALE = 30.0


@dataclass(frozen=True)
class Box:
    """Corner box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"invalid box corners {self}")

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def size(self):
        return (self.x2 - self.x1, self.y2 - self.y1)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2])

    def clipped(self):
        c = [min(max(v, 0.0), 1.0) for v in (self.x1, self.y1, self.x2, self.y2)]
        return Box(*c)


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box


@dataclass(frozen=True)
class GridSpec:
    size: int  # cells per side

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("grid size must be >= 1")


@dataclass(frozen=True)
class DecodedBox:
    """One (anchor, cell) prediction; geometry is in grid-cell units."""

    b_x: float
    b_y: float
    b_w: float
    b_h: float
    objectness: float
    class_probs: tuple
    cell_x: int
    cell_y: int
    anchor: int
    grid: int

    @property
    def class_id(self):
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self):
        return self.objectness * max(self.class_probs)

    @property
    def cell_index(self):
        return self.cell_y * self.grid + self.cell_x

    def corners(self):
        """Unclipped corners in grid units."""
        return (self.b_x - self.b_w / 2, self.b_y - self.b_h / 2,
                self.b_x + self.b_w / 2, self.b_y + self.b_h / 2)

    def to_box(self):
        """Normalized box, clipped to the image."""
        s = self.grid
        x1, y1, x2, y2 = self.corners()
        return Box(x1 / s, y1 / s, x2 / s, y2 / s).clipped()


def split_raw(raw, num_anchors):
    """View a ``(A*(5+K), S, S)`` head as ``(A, 5+K, S, S)``."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] % num_anchors or raw.shape[0] // num_anchors < 5:
        raise ShapeError(f"head with shape {raw.shape} does not split into "
                         f"{num_anchors} anchors x (5 + K)")
    if raw.shape[1] != raw.shape[2]:
        raise ShapeError(f"head must be square, got {raw.shape[1:]}")
    return raw.reshape(num_anchors, -1, raw.shape[1], raw.shape[2])


def _unit_interval(p):
    return np.clip(p, PROB_EPS, 1 - PROB_EPS)


def decode_arrays(raw, anchors):
    """Vectorized decode; every returned array is float64 with leading (A, ..., S, S)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    r = split_raw(raw, len(anchors)).astype(np.float64)
    s = r.shape[-1]
    cy, cx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    t = r[:, :4]
    return {
        "t": t,
        "bx": _unit_interval(sigmoid(t[:, 0])) + cx,
        "by": _unit_interval(sigmoid(t[:, 1])) + cy,
        "bw": anchors[:, 0, None, None] * np.exp(np.clip(t[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE)),
        "bh": anchors[:, 1, None, None] * np.exp(np.clip(t[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)),
        "obj_logit": r[:, 4],
        "objectness": _unit_interval(sigmoid(r[:, 4])),
        "cls_logit": r[:, 5:],
        "class_probs": _unit_interval(sigmoid(r[:, 5:])),
    }


def decode(raw, anchors, grid: GridSpec | None = None):
    """Decode a raw head into one DecodedBox per (anchor, cell).

    Order is anchor-major, then row, then column.
    """
    d = decode_arrays(raw, anchors)
    a_count, s = d["bx"].shape[0], d["bx"].shape[-1]
    if grid is not None and grid.size != s:
        raise ShapeError(f"grid size {grid.size} != head size {s}")
    out = []
    for a in range(a_count):
        for y in range(s):
            for x in range(s):
                out.append(DecodedBox(
                    float(d["bx"][a, y, x]), float(d["by"][a, y, x]),
                    float(d["bw"][a, y, x]), float(d["bh"][a, y, x]),
                    float(d["objectness"][a, y, x]),
                    tuple(float(v) for v in d["class_probs"][a, :, y, x]),
                    x, y, a, s))
    return out


def _logit(p):
    return np.log(p) - np.log1p(-p)


def encode(gt_grid, cell, anchor):
    """Targets ``(t_x, t_y, t_w, t_h)`` for a box ``(b_x, b_y, b_w, b_h)`` in grid units.

    The center must lie in the closed cell; offsets on the boundary are
    clamped to ``[ENCODE_EPS, 1 - ENCODE_EPS]``.
    """
    bx, by, bw, bh = (float(v) for v in gt_grid)
    cx, cy = cell
    pw, ph = anchor
    if bw <= 0 or bh <= 0:
        raise ValueError(f"box size must be positive, got {bw}x{bh}")
    ox, oy = bx - cx, by - cy
    if not (0 <= ox <= 1 and 0 <= oy <= 1):
        raise ValueError(f"center ({bx}, {by}) is outside cell {cell}")
    ox = min(max(ox, ENCODE_EPS), 1 - ENCODE_EPS)
    oy = min(max(oy, ENCODE_EPS), 1 - ENCODE_EPS)
    return (float(_logit(ox)), float(_logit(oy)),
            float(np.log(bw / pw)), float(np.log(bh / ph)))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU of corner arrays ``(n, 4)`` and ``(m, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def _rank_key(d: DecodedBox):
    return (-d.confidence, d.cell_index, d.anchor)


def nms(dets, iou_threshold=0.45):
    """Greedy class-wise suppression; survivors sorted by confidence."""
    by_class = {}
    for d in sorted(dets, key=_rank_key):
        by_class.setdefault(d.class_id, []).append(d)
    keep = []
    for group in by_class.values():
        corners = np.array([d.corners() for d in group])
        ious = iou_matrix(corners, corners)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            keep.append(group[i])
            later = np.arange(i + 1, len(group))
            alive[later[ious[i, i + 1:] > iou_threshold]] = False
    return sorted(keep, key=_rank_key)


class ObjectnessTarget(NamedTuple):
    kind: str  # "positive" | "ignore" | "negative"
    gt_index: int | None = None


def objectness_targets(preds, gts, ignore_threshold=0.5):
    """Label every prediction box against the ground-truth boxes.

    A prediction is positive for the gt it overlaps better than every other
    prediction does; otherwise it is ignored when its best IoU with any gt
    exceeds ``ignore_threshold``, and negative below that.
    """
    preds = list(preds)
    out = [ObjectnessTarget("negative")] * len(preds)
    if not preds or not gts:
        return out
    ious = iou_matrix([p.as_array() for p in preds], [g.as_array() for g in gts])
    best_pred = ious.argmax(axis=0)  # first maximum wins ties
    owner = {}
    for g, p in enumerate(best_pred):
        if ious[p, g] <= 0:
            continue
        if p not in owner or ious[p, g] > ious[p, owner[p]]:
            owner[p] = g
    for p in range(len(preds)):
        if p in owner:
            out[p] = ObjectnessTarget("positive", owner[p])
        elif ious[p].max() > ignore_threshold:
            out[p] = ObjectnessTarget("ignore")
    return out


def objectness_target(pred: Box, gts, others=()):
    """Target for ``pred`` when competing against ``others`` predictions."""
    return objectness_targets([pred, *others], gts)[0]


def shape_iou(w1, h1, w2, h2):
    """IoU of two boxes sharing a center."""
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)
