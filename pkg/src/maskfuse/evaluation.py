"""Instance-segmentation metrics: Kaggle DSB mAP, object Dice, detection
statistics and recall-by-property sensitivity analysis.

``per_image`` arguments are sequences of ``(preds, gts)`` pairs of
:class:`~maskfuse.mask_core.InstanceMask` lists. IoU thresholds are compared
exactly as the decimal they print as (``0.7`` means 7/10) using integer
pixel counts, so a pair with IoU exactly equal to the threshold is unmatched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

from .errors import InsufficientData, ThresholdTooLow
from .features import compute_properties
from .mask_core import (
    areas,
    connected_components,
    label_map_from_instances,
    morphology,
    pairwise_intersection,
)

THRESHOLDS = tuple(Fraction(50 + 5 * k, 100) for k in range(10))
CLUSTER_GROUPS = ((1, 1), (2, 2), (3, 5), (6, None))


def _fraction(t) -> Fraction:
    return t if isinstance(t, Fraction) else Fraction(str(t))


@dataclass(frozen=True)
class Overlap:
    """Pixel intersections and areas for one image's prediction/GT lists."""

    inter: np.ndarray
    pred_area: np.ndarray
    gt_area: np.ndarray

    @classmethod
    def of(cls, preds, gts) -> "Overlap":
        return cls(pairwise_intersection(preds, gts), areas(preds), areas(gts))

    @property
    def union(self) -> np.ndarray:
        return self.pred_area[:, None] + self.gt_area[None, :] - self.inter

    def matched(self, t) -> np.ndarray:
        """Boolean (pred, gt) matrix of pairs with IoU > t."""
        t = _fraction(t)
        return (self.inter > 0) & (self.inter * t.denominator > t.numerator * self.union)


@dataclass
class MatchResult:
    threshold: float
    pairs: list
    fp_count: int
    fn_count: int

    @property
    def tp_count(self) -> int:
        return len(self.pairs)


def match_at_threshold(preds, gts, t=0.5) -> MatchResult:
    """Pair predictions and ground truth with IoU > t (t >= 0.5 makes pairs unique)."""
    if _fraction(t) < Fraction(1, 2):
        raise ThresholdTooLow(f"matching threshold {t} < 0.5 is ambiguous")
    ov = Overlap.of(preds, gts)
    m = ov.matched(t)
    pairs = []
    for i, j in zip(*np.nonzero(m)):
        pairs.append((preds[i].id, gts[j].id, float(ov.inter[i, j] / ov.union[i, j])))
    tp = len(pairs)
    return MatchResult(float(t), pairs, len(preds) - tp, len(gts) - tp)


def _image_scores(ov: Overlap) -> list[float]:
    n_pred, n_gt = len(ov.pred_area), len(ov.gt_area)
    out = []
    for t in THRESHOLDS:
        if n_pred == 0 and n_gt == 0:
            out.append(1.0)
            continue
        tp = int(ov.matched(t).sum())
        out.append(tp / (n_pred + n_gt - tp))
    return out


def kaggle_map(per_image, overlaps: Sequence[Overlap] | None = None) -> tuple[float, list[float]]:
    """Mean over images of the mean over IoU thresholds 0.50..0.95 of TP/(TP+FP+FN)."""
    if overlaps is None:
        overlaps = [Overlap.of(p, g) for p, g in per_image]
    if not overlaps:
        return 1.0, [1.0] * len(THRESHOLDS)
    scores = np.array([_image_scores(ov) for ov in overlaps])
    per_image_mean = scores.mean(axis=1)
    return float(per_image_mean.mean()), [float(v) for v in scores.mean(axis=0)]


@dataclass
class DetectionStats:
    precision: float
    recall: float
    oseg_count: int
    useg_count: int
    tp: int
    fp: int
    fn: int


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def detection_stats(per_image, t=0.7, aggregate: Literal["micro", "macro"] = "micro",
                    overlaps: Sequence[Overlap] | None = None) -> DetectionStats:
    """Precision/recall at IoU > t plus over- and under-segmentation counts.

    Oversegmentation: a GT with two or more predictions that lie at least half
    inside it (|p & g| / |p| >= 0.5). Undersegmentation: a prediction that
    covers at least half of two or more GTs (|p & g| / |g| >= 0.5).
    """
    if _fraction(t) < Fraction(1, 2):
        raise ThresholdTooLow(f"matching threshold {t} < 0.5 is ambiguous")
    if aggregate not in ("micro", "macro"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if overlaps is None:
        overlaps = [Overlap.of(p, g) for p, g in per_image]
    TP = FP = FN = oseg = useg = 0
    precs, recs = [], []
    for ov in overlaps:
        tp = int(ov.matched(t).sum())
        fp, fn = len(ov.pred_area) - tp, len(ov.gt_area) - tp
        TP, FP, FN = TP + tp, FP + fp, FN + fn
        precs.append(_ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0))
        recs.append(_ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0))
        inside_gt = (ov.inter > 0) & (2 * ov.inter >= ov.pred_area[:, None])
        covers_gt = (ov.inter > 0) & (2 * ov.inter >= ov.gt_area[None, :])
        oseg += int((inside_gt.sum(axis=0) >= 2).sum())
        useg += int((covers_gt.sum(axis=1) >= 2).sum())
    if aggregate == "micro":
        precision = _ratio(TP, TP + FP, 1.0 if FN == 0 else 0.0)
        recall = _ratio(TP, TP + FN, 1.0 if FP == 0 else 0.0)
    else:
        precision = float(np.mean(precs)) if precs else 1.0
        recall = float(np.mean(recs)) if recs else 1.0
    return DetectionStats(precision, recall, oseg, useg, TP, FP, FN)


def _image_dice(ov: Overlap) -> float:
    def half(inter, own, other):
        # inter: (own x other)
        if len(own) == 0:
            return 0.0
        total = own.sum()
        acc = 0.0
        for i in range(len(own)):
            if inter.shape[1] == 0 or inter[i].max() == 0:
                continue
            # among equally overlapping counterparts the smallest gives the best Dice
            best = inter[i] == inter[i].max()
            j = int(np.flatnonzero(best)[np.argmin(other[best])])
            acc += (own[i] / total) * (2.0 * inter[i, j] / (own[i] + other[j]))
        return acc

    return 0.5 * (half(ov.inter.T, ov.gt_area, ov.pred_area) + half(ov.inter, ov.pred_area, ov.gt_area))


def object_dice(per_image, overlaps: Sequence[Overlap] | None = None) -> float:
    """Symmetric area-weighted object Dice, averaged over images with any instance.

    Each object is compared with the counterpart it overlaps most; ties in
    overlap go to the counterpart giving the higher Dice, so the value does
    not depend on instance order.
    """
    if overlaps is None:
        overlaps = [Overlap.of(p, g) for p, g in per_image]
    vals = [_image_dice(ov) for ov in overlaps if len(ov.pred_area) + len(ov.gt_area) > 0]
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class EvalReport:
    map_score: float
    ap_by_threshold: list
    object_dice: float
    precision: float
    recall: float
    oseg_count: int
    useg_count: int
    image_count: int
    threshold: float = 0.7

    def row(self) -> dict:
        return {
            "mAP": self.map_score,
            "Dice": self.object_dice,
            "Precision": self.precision,
            "Recall": self.recall,
            "oseg": self.oseg_count,
            "useg": self.useg_count,
        }


def evaluate(per_image, t=0.7, aggregate: Literal["micro", "macro"] = "micro", pmap=map) -> EvalReport:
    per_image = list(per_image)
    overlaps = list(pmap(lambda pg: Overlap.of(*pg), per_image))
    m, ap = kaggle_map(per_image, overlaps)
    stats = detection_stats(per_image, t, aggregate, overlaps)
    return EvalReport(
        map_score=m,
        ap_by_threshold=ap,
        object_dice=object_dice(per_image, overlaps),
        precision=stats.precision,
        recall=stats.recall,
        oseg_count=stats.oseg_count,
        useg_count=stats.useg_count,
        image_count=len(per_image),
        threshold=float(t),
    )


def cluster_sizes(gt: np.ndarray, dilation_radius: int = 1) -> dict[int, int]:
    """Number of GT instances sharing each instance's dilated 8-connected cluster."""
    gt = np.asarray(gt)
    fg = gt > 0
    if not fg.any():
        return {}
    comps = connected_components(morphology(fg, "dilate", dilation_radius, "square"), 8)
    ids, first = np.unique(gt.ravel(), return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    comp_of = comps.ravel()[first]
    counts = np.bincount(comp_of)
    return {int(i): int(counts[c]) for i, c in zip(ids, comp_of)}


@dataclass
class SensitivityBin:
    lo: float
    hi: float
    gt_count: int
    matched: int

    @property
    def recall(self) -> float:
        return self.matched / self.gt_count if self.gt_count else float("nan")


@dataclass
class SensitivityReport:
    property: str
    threshold: float
    bins: list = field(default_factory=list)


def gt_property_values(per_image, prop: str, dilation_radius: int = 1) -> list[tuple[float, int, int]]:
    """(value, image_index, gt_id) for every GT instance."""
    out = []
    for k, (_, gts) in enumerate(per_image):
        if prop == "cluster_size":
            if not gts:
                continue
            h, w = gts[0].shape
            sizes = cluster_sizes(label_map_from_instances(gts, h, w, "lowest_id_wins"), dilation_radius)
            out += [(float(sizes.get(g.id, 1)), k, g.id) for g in gts]
        elif prop == "area":
            out += [(float(g.area), k, g.id) for g in gts]
        elif prop == "eccentricity":
            out += [(compute_properties(g).eccentricity, k, g.id) for g in gts]
        else:
            raise ValueError(f"unknown property {prop!r}")
    return out


def sensitivity_report(per_image, prop: str, bins: int = 4, t=0.7) -> SensitivityReport:
    """Recall at IoU > t for GT instances grouped by a structural property.

    Area and eccentricity use equal-count bins over the sorted values;
    cluster size uses the fixed groups 1, 2, 3-5 and 6+.
    """
    per_image = list(per_image)
    values = gt_property_values(per_image, prop)
    if len(values) < bins:
        raise InsufficientData(f"{len(values)} GT instances cannot fill {bins} bins")
    matched = set()
    for k, (preds, gts) in enumerate(per_image):
        m = Overlap.of(preds, gts).matched(t).any(axis=0)
        matched.update((k, g.id) for g, hit in zip(gts, m) if hit)

    report = SensitivityReport(prop, float(t))
    if prop == "cluster_size":
        for lo, hi in CLUSTER_GROUPS:
            members = [v for v in values if v[0] >= lo and (hi is None or v[0] <= hi)]
            report.bins.append(SensitivityBin(
                float(lo), float("inf") if hi is None else float(hi), len(members),
                sum((k, i) in matched for _, k, i in members),
            ))
        return report

    ordered = sorted(values)
    for group in np.array_split(np.arange(len(ordered)), bins):
        members = [ordered[i] for i in group]
        report.bins.append(SensitivityBin(
            members[0][0], members[-1][0], len(members),
            sum((k, i) in matched for _, k, i in members),
        ))
    return report
