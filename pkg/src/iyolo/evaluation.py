"""Detection/classification rates and precision-recall sweeps.

Matching is class-agnostic: a detection is a true positive when it claims
an unmatched ground truth with IoU >= threshold, and whether its class label
is right is tracked separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, GroundTruth, iou_matrix
from .errors import NoGroundTruthError

__all__ = ["GroundTruth", "Detection", "MatchResult", "MetricsReport",
           "match", "metrics", "pr_curve"]


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Box
    confidence: float


@dataclass
class MatchResult:
    # per detection, in the order given: (gt_index, class_correct) or None for FP
    det_verdicts: list = field(default_factory=list)
    gt_matched: list = field(default_factory=list)
    confidences: list = field(default_factory=list)

    @property
    def tp(self):
        return sum(v is not None for v in self.det_verdicts)

    @property
    def fp(self):
        return sum(v is None for v in self.det_verdicts)

    @property
    def fn(self):
        return sum(not m for m in self.gt_matched)

    @property
    def class_correct(self):
        return sum(v is not None and v[1] for v in self.det_verdicts)


@dataclass(frozen=True)
class MetricsReport:
    detection_rate: float
    error_detection_rate: float
    classification_rate: float
    error_classification_rate: float

    COLUMNS = ("detection_rate", "error_detection_rate",
               "classification_rate", "error_classification_rate")

    def as_row(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


def _order(dets):
    # stable sort: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match(dets, gts, iou_threshold=0.5):
    """Greedy matching in descending confidence; verdicts follow that order."""
    order = _order(dets)
    dets = [dets[i] for i in order]
    result = MatchResult(gt_matched=[False] * len(gts),
                         confidences=[d.confidence for d in dets])
    if not dets:
        return result
    if not gts:
        result.det_verdicts = [None] * len(dets)
        return result
    ious = iou_matrix([d.box.as_array() for d in dets], [g.box.as_array() for g in gts])
    for i, d in enumerate(dets):
        cand = np.where(result.gt_matched, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            result.gt_matched[j] = True
            result.det_verdicts.append((j, d.class_id == gts[j].class_id))
        else:
            result.det_verdicts.append(None)
    return result


def metrics(results):
    """Corpus-level rates from a list of per-image MatchResults."""
    results = list(results)
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    correct = sum(r.class_correct for r in results)
    if tp + fn == 0:
        raise NoGroundTruthError("no ground truth in corpus")
    dets = tp + fp
    return MetricsReport(
        detection_rate=tp / (tp + fn),
        error_detection_rate=fp / dets if dets else 0.0,
        classification_rate=correct / tp if tp else 0.0,
        error_classification_rate=(tp - correct) / dets if dets else 0.0,
    )


def pr_curve(results):
    """``(threshold, precision, recall)`` at every distinct confidence, descending.

    Greedy matching in confidence order is prefix-stable, so the verdicts of
    the full match give the counts for every threshold.
    """
    total_gt = sum(len(r.gt_matched) for r in results)
    scored = []
    for r in results:
        scored.extend(zip(r.confidences, (v is not None for v in r.det_verdicts)))
    scored.sort(key=lambda s: -s[0])
    points = []
    tp = fp = 0
    i = 0
    while i < len(scored):
        thr = scored[i][0]
        while i < len(scored) and scored[i][0] == thr:
            tp += scored[i][1]
            fp += not scored[i][1]
            i += 1
        recall = tp / total_gt if total_gt else 0.0
        points.append((thr, tp / (tp + fp), recall))
    return points
