"""IoU-based crop categorisation and online hard example selection."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box, iou


@dataclass(frozen=True)
class SampleThresholds:
    neg_max: float = 0.3
    part_max: float = 0.65

    def __post_init__(self):
        if not 0 < self.neg_max < self.part_max < 1:
            raise ValueError("need 0 < neg_max < part_max < 1")


class SampleCategory(enum.Enum):
    NEGATIVE = "negative"
    PART = "part"
    POSITIVE = "positive"

    @property
    def for_classification(self):
        return self is not SampleCategory.PART

    @property
    def for_regression(self):
        return self is not SampleCategory.NEGATIVE


@dataclass(frozen=True)
class MiningConfig:
    hard_ratio: float = 0.7

    def __post_init__(self):
        if not 0 < self.hard_ratio <= 1:
            raise ValueError("hard_ratio must be in (0, 1]")


def categorize(iou_value, th: SampleThresholds = SampleThresholds()):
    # zero overlap is counted as negative as well
    if not 0.0 <= iou_value <= 1.0:
        raise ValueError(f"IoU {iou_value} outside [0, 1]")
    if iou_value <= th.neg_max:
        return SampleCategory.NEGATIVE
    if iou_value <= th.part_max:
        return SampleCategory.PART
    return SampleCategory.POSITIVE


@dataclass(frozen=True)
class Crop:
    box: Box
    category: SampleCategory
    class_id: int  # class of the best-overlapping gt, -1 if the image has none
    iou: float


def _best_match(box, gts):
    best, cls = 0.0, -1
    for gt in gts:
        v = iou(box, gt.box)
        if cls < 0 or v > best:
            best, cls = v, gt.class_id
    return best, cls


def _jittered(rng, gt):
    w, h = gt.box.size
    cx, cy = gt.box.center
    cx += rng.uniform(-0.5, 0.5) * w
    cy += rng.uniform(-0.5, 0.5) * h
    scale = rng.uniform(0.8, 1.25)
    return Box.from_center(cx, cy, w * scale, h * scale).clipped()


def _uniform_window(rng):
    w, h = rng.uniform(0.05, 0.5, size=2)
    x1 = rng.uniform(0, 1 - w)
    y1 = rng.uniform(0, 1 - h)
    return Box(x1, y1, x1 + w, y1 + h)


def generate_crops(gts, quotas, rng_seed, th: SampleThresholds = SampleThresholds(),
                   max_attempts_factor=100):
    """Sample crops until each category's quota is met or attempts run out.

    ``quotas`` maps SampleCategory to a count. Positive and part candidates
    jitter a random gt (center +-50% of its size, scale in [0.8, 1.25]);
    negative candidates are uniform windows. Every candidate is labelled by
    its best IoU against ``gts`` and kept if its category still has room.
    """
    rng = np.random.default_rng(rng_seed)
    want = {c: int(quotas.get(c, 0)) for c in SampleCategory}
    if any(v < 0 for v in want.values()):
        raise ValueError("quotas must be >= 0")
    got = {c: 0 for c in SampleCategory}
    crops = []
    budget = max_attempts_factor * sum(want.values())
    for _ in range(budget):
        if all(got[c] >= want[c] for c in SampleCategory):
            break
        need_near = (got[SampleCategory.POSITIVE] < want[SampleCategory.POSITIVE]
                     or got[SampleCategory.PART] < want[SampleCategory.PART])
        need_neg = got[SampleCategory.NEGATIVE] < want[SampleCategory.NEGATIVE]
        if gts and need_near and (not need_neg or rng.random() < 0.5):
            box = _jittered(rng, gts[rng.integers(len(gts))])
        else:
            box = _uniform_window(rng)
        if box.area <= 0:
            continue
        value, cls = _best_match(box, gts)
        cat = categorize(value, th)
        if got[cat] < want[cat]:
            got[cat] += 1
            crops.append(Crop(box, cat, cls, value))
    return crops


def hard_count(n, cfg: MiningConfig = MiningConfig()):
    return max(1, math.floor(cfg.hard_ratio * n + 1e-9))


def ohem_select(losses, cfg: MiningConfig = MiningConfig()):
    """Indices of the hardest ``max(1, floor(ratio * N))`` samples, largest loss first."""
    losses = [float(v) for v in losses]
    if not losses:
        raise ValueError("ohem_select needs at least one loss")
    if any(math.isnan(v) for v in losses):
        raise ValueError("NaN loss in batch")
    order = sorted(range(len(losses)), key=lambda i: (-losses[i], i))
    return order[:hard_count(len(losses), cfg)]
