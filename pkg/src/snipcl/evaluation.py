"""Frame probabilities -> scored segments -> mAP@tIoU, plus frozen-feature KNN."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

TIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
SEGMENT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
NMS_IOU = 0.4


@dataclass(frozen=True)
class Segment:
    class_id: int
    start: int
    end: int  # exclusive
    score: float
    video: int = 0

    def __post_init__(self):
        if self.start >= self.end:
            raise ContractError(f"segment needs start < end, got [{self.start}, {self.end})")
        if not np.isfinite(self.score):
            raise ContractError("segment score must be finite")


def tiou(a, b) -> float:
    """Intersection over union of two half-open frame intervals."""
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def threshold_segments(probs: np.ndarray, thresholds=SEGMENT_THRESHOLDS, video: int = 0) -> list[Segment]:
    """Maximal runs with ``probs[t, k] >= theta`` for every class ``k >= 1`` and threshold.

    A run scores the mean probability of its class over the run. Candidates
    from all thresholds are pooled (duplicates are left for NMS).
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("threshold_segments needs at least one threshold")
    probs = np.asarray(probs, dtype=np.float64)
    out = []
    for k in range(1, probs.shape[1]):
        col = probs[:, k]
        csum = np.concatenate([[0.0], np.cumsum(col)])
        for theta in thresholds:
            above = np.concatenate([[False], col >= theta, [False]])
            edges = np.flatnonzero(above[1:] != above[:-1])
            for s, e in zip(edges[0::2], edges[1::2]):
                out.append(Segment(k, int(s), int(e), float((csum[e] - csum[s]) / (e - s)), video))
    return out


def _nms_order(seg: Segment):
    return (-seg.score, seg.start, -(seg.end - seg.start))


def nms(candidates, iou_threshold: float = NMS_IOU) -> list[Segment]:
    """Greedy per-class (and per-video) non-maximum suppression.

    Ties in score go to the earlier start, then the longer segment.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    groups: dict[tuple[int, int], list[Segment]] = {}
    for c in candidates:
        groups.setdefault((c.video, c.class_id), []).append(c)
    kept = []
    for key in sorted(groups):
        remaining = sorted(groups[key], key=_nms_order)
        while remaining:
            best = remaining.pop(0)
            kept.append(best)
            remaining = [c for c in remaining if tiou(best, c) <= iou_threshold]
    return kept


def detect(probs: np.ndarray, thresholds=SEGMENT_THRESHOLDS, iou_threshold: float = NMS_IOU,
           video: int = 0) -> list[Segment]:
    return nms(threshold_segments(probs, thresholds, video), iou_threshold)


def _ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-points interpolated area under the precision-recall curve."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(preds, gts, tiou_threshold: float, class_id: int | None = None) -> float | None:
    """Detection AP of one class; ``None`` when the class has no ground truth.

    ``class_id`` defaults to the single class present in ``gts``.
    """
    if class_id is None:
        classes = {g.class_id for g in gts}
        if len(classes) > 1:
            raise ContractError(f"ground truth spans classes {sorted(classes)}; pass class_id")
        if not classes:
            return None
        class_id = classes.pop()
    gts = [g for g in gts if g.class_id == class_id]
    if not gts:
        return None
    preds = sorted((p for p in preds if p.class_id == class_id),
                   key=lambda p: (-p.score, p.video, p.start, p.end))
    if not preds:
        return 0.0
    by_video: dict[int, list] = {}
    for g in gts:
        by_video.setdefault(g.video, []).append(g)
    used = {v: [False] * len(lst) for v, lst in by_video.items()}
    tp = np.zeros(len(preds))
    for i, p in enumerate(preds):
        cands = by_video.get(p.video, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[p.video][j]:
                continue
            iou = tiou(p, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= tiou_threshold:
            used[p.video][best] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(preds) + 1)
    recall = ctp / len(gts)
    return _ap_from_pr(precision, recall)


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)  # class -> {tiou: ap}
    per_tiou_map: dict = field(default_factory=dict)  # tiou -> mAP
    avg_map: float = 0.0
    absent_classes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_class": {str(c): {f"{t:.1f}": v for t, v in row.items()} for c, row in self.per_class.items()},
            "per_tiou_map": {f"{t:.1f}": v for t, v in self.per_tiou_map.items()},
            "avg_map": self.avg_map,
            "absent_classes": list(self.absent_classes),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        thr = sorted(self.per_tiou_map)
        lines = ["row," + ",".join(f"{t:.1f}" for t in thr) + ",avg"]
        for c in sorted(self.per_class):
            vals = [self.per_class[c][t] for t in thr]
            lines.append(f"class_{c}," + ",".join(f"{v:.6f}" for v in vals) + f",{np.mean(vals):.6f}")
        lines.append("mAP," + ",".join(f"{self.per_tiou_map[t]:.6f}" for t in thr) + f",{self.avg_map:.6f}")
        return "\n".join(lines) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class", "per_tiou_map", "avg_map"],
    "properties": {
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "per_tiou_map": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "avg_map": {"type": "number", "minimum": 0, "maximum": 1},
        "absent_classes": {"type": "array", "items": {"type": "integer"}},
    },
}


def map_report(preds, gts, thresholds=TIOU_THRESHOLDS, classes=None) -> EvalReport:
    """AP for every present class at every tIoU, their means, and the grand mean."""
    if classes is None:
        classes = sorted({g.class_id for g in gts} | {p.class_id for p in preds})
    report = EvalReport()
    for c in classes:
        row = {}
        for t in thresholds:
            ap = average_precision(preds, gts, t, class_id=c)
            if ap is None:
                break
            row[t] = ap
        if row:
            report.per_class[c] = row
        else:
            report.absent_classes.append(c)
    for t in thresholds:
        vals = [row[t] for row in report.per_class.values()]
        report.per_tiou_map[t] = float(np.mean(vals)) if vals else 0.0
    report.avg_map = float(np.mean(list(report.per_tiou_map.values())))
    return report


def knn_frame_classify(train_feats, train_labels, test_feats, k: int = 9, num_classes: int | None = None):
    """Cosine-similarity KNN vote per test frame.

    Returns ``(labels [n_test], scores [n_test, num_classes])`` where scores
    are vote fractions. Neighbor ties go to the lower training index; vote
    ties to the lower class.
    """
    train = np.asarray(train_feats, dtype=np.float64)
    test = np.asarray(test_feats, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if len(train) == 0:
        raise ContractError("KNN needs at least one training frame")
    if k > len(train):
        logger.warning("KNN: K=%d exceeds %d training frames; clamping", k, len(train))
        k = len(train)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    sims = test @ train.T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(test), num_classes))
    np.add.at(votes, (np.repeat(np.arange(len(test)), k), labels[nearest].ravel()), 1.0)
    return np.argmax(votes, axis=1), votes / k


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)
