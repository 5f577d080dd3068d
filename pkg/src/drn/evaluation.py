"""Rotated-box detection metrics: VOC-style AP, COCO-style mAP@[.5:.95], AP75, AR300."""
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Detection, Septet, iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchResult:
    """Greedy matching of one image's detections (sorted by score) to its ground truth."""

    scores: np.ndarray
    classes: np.ndarray
    tp: np.ndarray  # bool per detection
    matched_gt: np.ndarray  # gt index or -1
    gt_classes: np.ndarray

    def num_gt(self, class_id):
        return int((self.gt_classes == class_id).sum())


def sort_detections(dets: Sequence[Detection]):
    """Descending score; ties keep insertion order."""
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: Sequence[Detection], gts: Sequence[Tuple[int, Septet]], iou_threshold,
                     ious: Optional[np.ndarray] = None) -> MatchResult:
    """Match one image's detections to its ground truth at one IoU threshold.

    ``dets`` must already be in score order when ``ious`` is given (rows of
    ``ious`` follow ``dets``). A detection is a true positive when its best
    still-unmatched same-class ground truth reaches ``iou_threshold``.
    """
    if ious is None:
        dets = sort_detections(dets)
        ious = iou_matrix([d.box for d in dets], [b for _, b in gts])
    gt_classes = np.array([c for c, _ in gts], dtype=np.int64)
    taken = np.zeros(len(gts), bool)
    tp = np.zeros(len(dets), bool)
    matched = np.full(len(dets), -1, np.int64)
    for i, d in enumerate(dets):
        if not len(gts):
            break
        cand = np.where((gt_classes == d.class_id) & ~taken, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[i] = True
            matched[i] = j
            taken[j] = True
    return MatchResult(np.array([d.score for d in dets], dtype=np.float64),
                       np.array([d.class_id for d in dets], dtype=np.int64), tp, matched, gt_classes)


def pr_curve(results: Sequence[MatchResult], class_id):
    """Recall/precision arrays over the score-ranked detections of one class."""
    scores = np.concatenate([r.scores[r.classes == class_id] for r in results]) if results else np.zeros(0)
    tps = np.concatenate([r.tp[r.classes == class_id] for r in results]) if results else np.zeros(0, bool)
    npos = sum(r.num_gt(class_id) for r in results)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    # one PR point per distinct score, so tied detections count as a block and
    # the curve does not depend on image order
    s = scores[order]
    last = np.r_[s[1:] != s[:-1], True] if len(s) else np.zeros(0, bool)
    tp, fp = tp[last], fp[last]
    recall = tp / npos if npos else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision, npos


def average_precision(results: Sequence[MatchResult], class_id) -> float:
    """All-point interpolated AP; ``nan`` when the class has no ground truth."""
    recall, precision, npos = pr_curve(results, class_id)
    if npos == 0:
        return math.nan
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def max_recall(results: Sequence[MatchResult], class_id) -> float:
    npos = sum(r.num_gt(class_id) for r in results)
    if npos == 0:
        return math.nan
    return sum(int(r.tp[r.classes == class_id].sum()) for r in results) / npos


def _nanmean(values):
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


@dataclass
class MetricReport:
    per_class_ap: Dict[int, Dict[float, float]]
    map: float
    ap50: float
    ap75: float
    ar300: float
    center_acc: Optional[float] = None
    center_rec: Optional[float] = None
    pr_curves: Dict[int, Dict[str, List[float]]] = field(default_factory=dict)
    num_images: int = 0
    num_detections: int = 0

    def to_dict(self):
        d = asdict(self)
        d["per_class_ap"] = {str(c): {f"{t:.2f}": v for t, v in aps.items()} for c, aps in self.per_class_ap.items()}
        d["pr_curves"] = {str(c): v for c, v in self.pr_curves.items()}
        return d

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, allow_nan=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        d["per_class_ap"] = {int(c): {float(t): v for t, v in aps.items()} for c, aps in d["per_class_ap"].items()}
        d["pr_curves"] = {int(c): v for c, v in d.get("pr_curves", {}).items()}
        return cls(**d)


def cap_detections(dets, max_dets):
    return sort_detections(dets)[:max_dets]


def coco_metrics(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[Tuple[int, Septet]]],
                 thresholds=COCO_THRESHOLDS, max_dets=300, classes=None, with_center=True) -> MetricReport:
    """COCO-style summary over a dataset (lists aligned per image).

    Each image keeps at most ``max_dets`` detections by score. Classes
    without ground truth are left out of every mean.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    dets = [cap_detections(d, max_dets) for d in detections]
    ious = [iou_matrix([d.box for d in ds], [b for _, b in gs]) for ds, gs in zip(dets, ground_truth)]
    if classes is None:
        classes = sorted({c for gs in ground_truth for c, _ in gs} | {d.class_id for ds in dets for d in ds})
    per_class = {c: {} for c in classes}
    recalls = {c: {} for c in classes}
    pr = {}
    for t in thresholds:
        results = [match_detections(ds, gs, t, iou) for ds, gs, iou in zip(dets, ground_truth, ious)]
        for c in classes:
            per_class[c][t] = average_precision(results, c)
            recalls[c][t] = max_recall(results, c)
            if math.isclose(t, 0.5):
                rec, prec, _ = pr_curve(results, c)
                pr[c] = {"recall": rec.tolist(), "precision": prec.tolist()}

    def at(t):
        return _nanmean([per_class[c][t] for c in classes]) if t in thresholds else math.nan

    report = MetricReport(
        per_class_ap=per_class,
        map=_nanmean([per_class[c][t] for c in classes for t in thresholds]),
        ap50=at(0.5), ap75=at(0.75),
        ar300=_nanmean([recalls[c][t] for c in classes for t in thresholds]),
        pr_curves=pr, num_images=len(dets), num_detections=sum(len(d) for d in dets))
    if with_center:
        report.center_acc, report.center_rec = center_point_metrics(detections, ground_truth, top_k=max_dets)
    return report


def voc_map(detections, ground_truth, iou_threshold=0.5):
    """Mean over classes of all-point AP at one IoU threshold."""
    report = coco_metrics(detections, ground_truth, thresholds=(iou_threshold,), with_center=False)
    return _nanmean([aps[iou_threshold] for aps in report.per_class_ap.values()])


def center_point_metrics(detections, ground_truth, top_k=300, iou_threshold=0.5):
    """Accuracy and recall of the top-``k`` predicted centers.

    A predicted center counts as correct when its box matches a not yet
    matched ground truth at IoU >= ``iou_threshold``. Acc = correct /
    predicted (0 with no predictions), Rec = matched / ground truth.
    """
    correct = predicted = total_gt = 0
    for ds, gs in zip(detections, ground_truth):
        ds = cap_detections(ds, top_k)
        r = match_detections(ds, gs, iou_threshold)
        correct += int(r.tp.sum())
        predicted += len(ds)
        total_gt += len(gs)
    acc = correct / predicted if predicted else 0.0
    rec = correct / total_gt if total_gt else 0.0
    return acc, rec
