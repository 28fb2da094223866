"""Segmentation metrics: panoptic quality, mean IoU and COCO-style mask AP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pipeline import PanopticMap


@dataclass
class CategoryStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def pq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / den if den else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / den if den else 0.0


@dataclass
class PQReport:
    """Fractions in [0, 1]; ``as_dict`` reports them x100."""

    per_category: dict[int, CategoryStats] = field(default_factory=dict)
    is_thing: dict[int, bool] = field(default_factory=dict)

    def _average(self, attr: str, which: bool | None = None) -> float:
        cats = [c for c, s in self.per_category.items()
                if s.tp + s.fp + s.fn > 0 and (which is None or self.is_thing[c] == which)]
        if not cats:
            return 0.0
        return float(np.mean([getattr(self.per_category[c], attr) for c in cats]))

    @property
    def pq(self) -> float:
        return self._average("pq")

    @property
    def sq(self) -> float:
        return self._average("sq")

    @property
    def rq(self) -> float:
        return self._average("rq")

    def split(self, attr: str, thing: bool) -> float:
        return self._average(attr, thing)

    def merge(self, other: "PQReport") -> "PQReport":
        out = PQReport({}, {**self.is_thing, **other.is_thing})
        for src in (self, other):
            for c, s in src.per_category.items():
                t = out.per_category.setdefault(c, CategoryStats())
                t.iou_sum += s.iou_sum
                t.tp += s.tp
                t.fp += s.fp
                t.fn += s.fn
        return out

    def as_dict(self) -> dict[str, float]:
        return {
            "pq": 100 * self.pq, "sq": 100 * self.sq, "rq": 100 * self.rq,
            "pq_th": 100 * self.split("pq", True), "sq_th": 100 * self.split("sq", True),
            "rq_th": 100 * self.split("rq", True),
            "pq_st": 100 * self.split("pq", False), "sq_st": 100 * self.split("sq", False),
            "rq_st": 100 * self.split("rq", False),
            "tp": sum(s.tp for s in self.per_category.values()),
            "fp": sum(s.fp for s in self.per_category.values()),
            "fn": sum(s.fn for s in self.per_category.values()),
        }


def panoptic_quality(pred: PanopticMap, gt: PanopticMap) -> PQReport:
    """Match segments of equal category with IoU > 0.5.

    Ground-truth void pixels are removed from the union, and an unmatched
    prediction lying more than half on ground-truth void is not counted as FP.
    """
    if pred.segment_id.shape != gt.segment_id.shape:
        raise ValueError("prediction and ground truth differ in shape")
    p_ids, g_ids = pred.segment_id.ravel(), gt.segment_id.ravel()
    pairs, counts = np.unique(np.stack([p_ids, g_ids]), axis=1, return_counts=True)
    inter = {(int(a), int(b)): int(c) for (a, b), c in zip(pairs.T, counts)}
    p_area = {int(i): int(c) for i, c in zip(*np.unique(p_ids, return_counts=True))}
    g_area = {int(i): int(c) for i, c in zip(*np.unique(g_ids, return_counts=True))}

    report = PQReport()
    for segs in (pred.segments, gt.segments):
        for s in segs.values():
            report.is_thing[s.category] = s.is_thing
            report.per_category.setdefault(s.category, CategoryStats())

    matched_p, matched_g = set(), set()
    for (pi, gi), n in inter.items():
        if pi == 0 or gi == 0:
            continue
        ps, gs = pred.segments[pi], gt.segments[gi]
        if ps.category != gs.category:
            continue
        union = p_area[pi] + g_area[gi] - n - inter.get((pi, 0), 0)
        iou = n / union
        if iou > 0.5:
            st = report.per_category[gs.category]
            st.tp += 1
            st.iou_sum += iou
            matched_p.add(pi)
            matched_g.add(gi)
    for gi, gs in gt.segments.items():
        if gi not in matched_g and gi in g_area:
            report.per_category[gs.category].fn += 1
    for pi, ps in pred.segments.items():
        if pi in matched_p or pi not in p_area:
            continue
        if inter.get((pi, 0), 0) / p_area[pi] > 0.5:
            continue
        report.per_category[ps.category].fp += 1
    return report


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = -1):
    """Mean IoU over categories present in ``gt``; ``ignore`` pixels of gt are skipped.

    Returns ``(mean, per_category)`` with NaN for categories absent from gt.
    """
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label maps differ in shape")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    per = np.full(num_classes, np.nan)
    for c in range(num_classes):
        g = gt == c
        if not g.any():
            continue
        p = pred == c
        per[c] = (p & g).sum() / (p | g).sum()
    present = ~np.isnan(per)
    return (float(per[present].mean()) if present.any() else 0.0), per


# ------------------------------------------------------------------ AP

COCO_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Instance:
    mask: np.ndarray
    category: int
    score: float = 1.0
    image: int = 0


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _interpolated_precision(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    return float(np.mean([envelope[i] if i < len(envelope) else 0.0 for i in idx]))


def _category_ap(preds: list[Instance], gts: list[Instance], thr: float) -> float:
    preds = sorted(preds, key=lambda p: -p.score)  # stable: ties keep input order
    claimed = set()
    tp = np.zeros(len(preds))
    for k, p in enumerate(preds):
        best, best_iou = None, thr
        for j, g in enumerate(gts):
            if j in claimed or g.image != p.image:
                continue
            iou = _iou(p.mask, g.mask)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best is not None:
            claimed.add(best)
            tp[k] = 1
    return _interpolated_precision(tp, len(gts))


def instance_ap(preds: Sequence[Instance], gts: Sequence[Instance], thresholds=COCO_THRESHOLDS) -> dict[str, float]:
    """COCO-style mask AP: greedy confidence-ordered matching, 101-point interpolation.

    Categories without ground truth are skipped. Returns fractions for
    ``ap`` (mean over ``thresholds``), ``ap50`` and ``ap75``.
    """
    cats = sorted({g.category for g in gts})

    def at(thr: float) -> float:
        vals = [_category_ap([p for p in preds if p.category == c], [g for g in gts if g.category == c], thr)
                for c in cats]
        return float(np.mean(vals)) if vals else 0.0

    return {
        "ap": float(np.mean([at(t) for t in thresholds])),
        "ap50": at(0.5),
        "ap75": at(0.75),
    }
