"""Detection scoring: greedy matching, Recall/Precision, mean IoU and image-binned mAP."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import AxisAlignedBox, OrientedBox, box_iou

CLASSES = (
    "attached_ligament",
    "detached_ligament",
    "lobe",
    "bag",
    "rim",
    "ellipse",
    "droplet",
)

N_RECALL_BINS = 10

MATCHING_METADATA = {
    "matching": "greedy, descending confidence, ties by descending best IoU",
    "iou_comparison": "IoU >= threshold and IoU > 0",
    "mean_iou": "arithmetic mean over matched pairs only",
    "map": "mean over non-empty recall bins [0,0.1),...,[0.9,1.0] of mean per-image precision",
    "vacuous_image": "no GT and no predictions -> recall=precision=1, excluded from mAP bins",
    "no_gt_with_predictions": "recall=1, precision=0, excluded from mAP bins",
    "gt_without_predictions": "recall=0, precision=0",
    "mixed_box_kinds": "axis-aligned boxes promoted to oriented boxes with angle 0",
}


class ImageIdMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    """One object: class label, box and (for predictions) a confidence."""

    cls: str
    box: AxisAlignedBox | OrientedBox
    confidence: float | None = None
    image_id: str = ""

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}; expected one of {CLASSES}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    iou_threshold: float = 0.2

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)


def _bounds(annots) -> np.ndarray:
    if not annots:
        return np.zeros((0, 4))
    return np.array([a.box.bounds() for a in annots], dtype=float)


def iou_table(gt, pred, class_aware: bool = True) -> dict[tuple[int, int], float]:
    """Nonzero IoUs between gt and pred boxes, keyed by ``(gt_idx, pred_idx)``."""
    bg, bp = _bounds(gt), _bounds(pred)
    table = {}
    if len(bg) == 0 or len(bp) == 0:
        return table
    overlap = (
        (bg[:, None, 0] < bp[None, :, 2])
        & (bp[None, :, 0] < bg[:, None, 2])
        & (bg[:, None, 1] < bp[None, :, 3])
        & (bp[None, :, 1] < bg[:, None, 3])
    )
    for i, j in zip(*np.nonzero(overlap)):
        if class_aware and gt[i].cls != pred[j].cls:
            continue
        iou = box_iou(gt[i].box, pred[j].box)
        if iou > 0:
            table[int(i), int(j)] = iou
    return table


def _check_single_image(annots):
    ids = {a.image_id for a in annots}
    if len(ids) > 1:
        raise ImageIdMismatch(f"match() expects a single image, got ids {sorted(ids)}")
    return ids


def match(gt, pred, iou_threshold: float = 0.2, class_aware: bool = True) -> MatchResult:
    """Greedy one-to-one matching of predictions to ground truth.

    Predictions are visited by descending confidence (a missing confidence counts
    as 1), ties broken by descending best IoU and then input order. Each takes the
    unmatched GT with the highest IoU, provided that IoU reaches the threshold.
    """
    gt, pred = list(gt), list(pred)
    if len(_check_single_image(gt) | _check_single_image(pred)) > 1:
        raise ImageIdMismatch("gt and predictions refer to different images")

    table = iou_table(gt, pred, class_aware)
    candidates = defaultdict(list)
    for (i, j), iou in table.items():
        candidates[j].append((iou, i))
    best = {j: max(c)[0] for j, c in candidates.items()}

    def conf(j):
        c = pred[j].confidence
        return 1.0 if c is None else c

    order = sorted(range(len(pred)), key=lambda j: (-conf(j), -best.get(j, 0.0), j))
    taken = set()
    pairs, unmatched_pred = [], []
    for j in order:
        pick = None
        for iou, i in sorted(candidates.get(j, ()), key=lambda t: (-t[0], t[1])):
            if iou < iou_threshold:
                break
            if i not in taken:
                pick = (i, iou)
                break
        if pick is None:
            unmatched_pred.append(j)
        else:
            taken.add(pick[0])
            pairs.append((pick[0], j, pick[1]))
    unmatched_gt = [i for i in range(len(gt)) if i not in taken]
    return MatchResult(pairs, unmatched_gt, sorted(unmatched_pred), iou_threshold)


def recall_precision(m: MatchResult) -> tuple[float, float]:
    tp, fp, fn = m.tp, m.fp, m.fn
    if tp + fn == 0:
        return 1.0, (1.0 if fp == 0 else 0.0)
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    return recall, precision


def mean_iou(m: MatchResult) -> float:
    if not m.pairs:
        raise ValueError("mean IoU is undefined without matched pairs")
    return math.fsum(p[2] for p in m.pairs) / len(m.pairs)


@dataclass
class ImageReport:
    image_id: str
    n_gt: int
    n_pred: int
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    mean_iou: float | None
    match: MatchResult | None = field(default=None, repr=False)

    @classmethod
    def from_match(cls, image_id: str, m: MatchResult) -> "ImageReport":
        r, p = recall_precision(m)
        return cls(
            image_id,
            m.tp + m.fn,
            m.tp + m.fp,
            m.tp,
            m.fp,
            m.fn,
            r,
            p,
            mean_iou(m) if m.pairs else None,
            m,
        )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "recall": self.recall,
            "precision": self.precision,
            "mean_iou": self.mean_iou,
        }


def recall_bin(recall: float, n_bins: int = N_RECALL_BINS) -> int:
    # small epsilon keeps e.g. 0.3 (from 3/10) out of the [0.2, 0.3) bin
    return min(int(math.floor(recall * n_bins + 1e-9)), n_bins - 1)


def mean_ap(per_image_reports, n_bins: int = N_RECALL_BINS) -> float:
    """Image-binned mAP: average precision per recall bin, then mean over non-empty bins.

    Only images that contain at least one ground-truth object are binned.
    """
    bins = defaultdict(list)
    for r in per_image_reports:
        if r.n_gt > 0:
            bins[recall_bin(r.recall, n_bins)].append(r.precision)
    if not bins:
        raise ValueError("mAP needs at least one image with ground-truth objects")
    return math.fsum(math.fsum(v) / len(v) for _, v in sorted(bins.items())) / len(bins)


def pr_curve_ap(scored_hits, n_gt: int) -> float:
    """Conventional all-point interpolated AP from ``(confidence, is_tp)`` pairs."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not scored_hits:
        return 0.0
    hits = sorted(scored_hits, key=lambda t: -t[0])
    tp = np.cumsum([h[1] for h in hits], dtype=float)
    fp = np.cumsum([not h[1] for h in hits], dtype=float)
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[1.0], tp / (tp + fp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.nonzero(np.diff(recall))[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


@dataclass
class EvalReport:
    images: list[ImageReport]
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    mean_iou: float | None
    map: float | None
    pr_curve_ap: float | None
    iou_threshold: float
    class_aware: bool
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "class_aware": self.class_aware,
            "aggregate": {
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "recall": self.recall,
                "precision": self.precision,
                "mean_iou": self.mean_iou,
                "map": self.map,
                "pr_curve_ap": self.pr_curve_ap,
            },
            "images": [r.to_dict() for r in self.images],
            "metadata": self.metadata,
        }

    def summary_table(self, label: str = "detector") -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.2f}"

        head = f"{'':<12}{'mean IoU':>10}{'Recall':>10}{'Precision':>11}{'mAP':>8}"
        row = (
            f"{label:<12}{fmt(self.mean_iou):>10}{fmt(self.recall):>10}"
            f"{fmt(self.precision):>11}{fmt(self.map):>8}"
        )
        foot = (
            f"IoU threshold {self.iou_threshold:g}; TP={self.tp} FP={self.fp} FN={self.fn}; "
            f"PR-curve AP (conventional) {fmt(self.pr_curve_ap)}"
        )
        return "\n".join([head, row, foot])


def group_by_image(annots) -> dict[str, list[Annotation]]:
    out = defaultdict(list)
    for a in annots:
        out[a.image_id].append(a)
    return dict(out)


def evaluate(gt_by_image: dict, pred_by_image: dict, iou_threshold: float = 0.2,
             class_aware: bool = True) -> EvalReport:
    """Score a whole dataset. Both mappings must have the same image id set."""
    missing_pred = sorted(set(gt_by_image) - set(pred_by_image))
    missing_gt = sorted(set(pred_by_image) - set(gt_by_image))
    if missing_pred or missing_gt:
        raise ImageIdMismatch(
            f"image id sets differ: no predictions for {missing_pred}; no ground truth for {missing_gt}"
        )
    reports = []
    hits_by_class = defaultdict(list)
    gt_count_by_class = defaultdict(int)
    for image_id in sorted(gt_by_image):
        gt, pred = gt_by_image[image_id], pred_by_image[image_id]
        m = match(gt, pred, iou_threshold, class_aware)
        reports.append(ImageReport.from_match(image_id, m))
        matched = {j for _, j, _ in m.pairs}
        for a in gt:
            gt_count_by_class[a.cls if class_aware else "*"] += 1
        for j, a in enumerate(pred):
            c = 1.0 if a.confidence is None else a.confidence
            hits_by_class[a.cls if class_aware else "*"].append((c, j in matched))

    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    total = MatchResult([None] * tp, [None] * fn, [None] * fp, iou_threshold)
    recall, precision = recall_precision(total)
    ious = [p[2] for r in reports for p in r.match.pairs]
    has_gt = any(r.n_gt > 0 for r in reports)
    aps = [pr_curve_ap(hits_by_class[c], n) for c, n in sorted(gt_count_by_class.items()) if n > 0]
    return EvalReport(
        images=reports,
        tp=tp,
        fp=fp,
        fn=fn,
        recall=recall,
        precision=precision,
        mean_iou=math.fsum(ious) / len(ious) if ious else None,
        map=mean_ap(reports) if has_gt else None,
        pr_curve_ap=float(np.mean(aps)) if aps else None,
        iou_threshold=iou_threshold,
        class_aware=class_aware,
        metadata=dict(MATCHING_METADATA, n_recall_bins=N_RECALL_BINS),
    )
