"""IoU-regression scoring of candidate masks and NMS fusion of two sources."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InsufficientData, LengthMismatch
from .features import N_FEATURES, feature_matrix
from .gbm import GbmModel, TrainingConfig, train_gbm
from .mask_core import (
    InstanceMask,
    areas,
    iou_from_counts,
    label_map_from_instances,
    pairwise_intersection,
    pairwise_iou,
)
from .postprocess import resolve_overlaps

SOURCES = ("A", "B")


@dataclass(frozen=True)
class FusionConfig:
    score_threshold: float = 0.3
    nms_iou_threshold: float = 0.3

    def __post_init__(self):
        for name in ("score_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class ImageCandidates:
    image_id: str
    cand_a: list
    cand_b: list
    gt: list | None = None
    shape: tuple[int, int] | None = None

    def by_source(self, source: str) -> list:
        return self.cand_a if source == "A" else self.cand_b


def best_iou_targets(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask]) -> np.ndarray:
    """Per prediction, the best IoU against any ground-truth instance (0 if none)."""
    if not preds:
        return np.zeros(0)
    if not gts:
        return np.zeros(len(preds))
    return pairwise_iou(preds, gts).max(axis=1)


def predict_iou(model: GbmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.feature_count:
        raise LengthMismatch(f"feature vector of length {x.shape} vs model's {model.feature_count}")
    return float(model.predict(x[None, :])[0])


@dataclass
class FeatureTable:
    """Pooled per-candidate rows for both sources."""

    image_ids: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    instance_ids: list = field(default_factory=list)
    X: np.ndarray = field(default_factory=lambda: np.zeros((0, N_FEATURES)))
    target: np.ndarray | None = None

    def __len__(self):
        return len(self.image_ids)

    def keys(self):
        return list(zip(self.image_ids, self.sources, self.instance_ids))


def image_feature_rows(item: ImageCandidates, with_target: bool = True):
    """(keys, X, y) rows for one image; y is None without ground truth."""
    keys, blocks, ys = [], [], []
    for source in SOURCES:
        cands = item.by_source(source)
        if not cands:
            continue
        keys += [(item.image_id, source, m.id) for m in cands]
        blocks.append(feature_matrix(cands))
        if with_target and item.gt is not None:
            ys.append(best_iou_targets(cands, item.gt))
    X = np.vstack(blocks) if blocks else np.zeros((0, N_FEATURES))
    y = np.concatenate(ys) if ys else (np.zeros(0) if with_target and item.gt is not None else None)
    return keys, X, y


def build_feature_table(items: Sequence[ImageCandidates], with_target: bool = True, pmap=map) -> FeatureTable:
    table = FeatureTable()
    parts = list(pmap(lambda it: image_feature_rows(it, with_target), items))
    blocks, ys = [], []
    for keys, X, y in parts:
        for image_id, source, inst_id in keys:
            table.image_ids.append(image_id)
            table.sources.append(source)
            table.instance_ids.append(inst_id)
        blocks.append(X)
        if y is not None:
            ys.append(y)
    table.X = np.vstack(blocks) if blocks else np.zeros((0, N_FEATURES))
    if with_target and ys:
        table.target = np.concatenate(ys)
    return table


def assign_folds(image_ids: Sequence[str], k: int) -> dict[str, int]:
    """Balanced fold per image: order by (crc32(id), id), deal round-robin.

    With ``k == len(image_ids)`` this is leave-one-out.
    """
    ordered = sorted(set(image_ids), key=lambda s: (zlib.crc32(s.encode("utf-8")), s))
    return {image_id: i % k for i, image_id in enumerate(ordered)}


def oof_train(
    items: Sequence[ImageCandidates],
    k: int = 4,
    cfg: TrainingConfig = TrainingConfig(),
    table: FeatureTable | None = None,
    pmap=map,
) -> tuple[GbmModel, dict]:
    """Out-of-fold training of the shared IoU regressor.

    Returns the model trained on every row and the out-of-fold predictions
    keyed by ``(image_id, source, instance_id)``.
    """
    if k < 2:
        raise InsufficientData(f"need at least 2 folds, got {k}")
    if len(items) < k:
        raise InsufficientData(f"{len(items)} images cannot fill {k} folds")
    if table is None:
        table = build_feature_table(items, with_target=True, pmap=pmap)
    if len(table) == 0 or table.target is None:
        raise InsufficientData("no candidate masks with ground truth to train on")
    folds = assign_folds([it.image_id for it in items], k)
    row_fold = np.array([folds[i] for i in table.image_ids])

    oof = np.zeros(len(table))

    def run_fold(f):
        train = row_fold != f
        test = ~train
        if not test.any():
            return f, None
        if not train.any():
            raise InsufficientData(f"fold {f} leaves no training rows")
        model = train_gbm(table.X[train], table.target[train], cfg)
        return f, model.predict(table.X[test])

    for f, pred in pmap(run_fold, range(k)):
        if pred is not None:
            oof[row_fold == f] = pred
    model = train_gbm(table.X, table.target, cfg)
    return model, dict(zip(table.keys(), oof.tolist()))


@dataclass
class Candidate:
    source: str
    instance: InstanceMask
    score: float
    status: str = "pending"  # kept | suppressed | below_threshold
    suppressed_by: int | None = None  # index into the candidate list


@dataclass
class FusionResult:
    label_map: np.ndarray
    candidates: list
    provenance: list  # (fused_id, source, source_instance_id, score)


def fuse(
    cand_a: Sequence[InstanceMask],
    cand_b: Sequence[InstanceMask],
    model: GbmModel,
    cfg: FusionConfig = FusionConfig(),
    shape: tuple[int, int] | None = None,
    scores: tuple[np.ndarray, np.ndarray] | None = None,
) -> FusionResult:
    """Score both candidate sets, threshold, greedy NMS, resolve residual overlaps.

    Ranking is by descending score, then source A before B, then lower
    instance id. ``scores`` may supply precomputed predictions per source.
    """
    all_masks = list(cand_a) + list(cand_b)
    shapes = {tuple(m.shape) for m in all_masks}
    if shape is not None:
        shapes.add(tuple(shape))
    if len(shapes) > 1:
        raise DimensionMismatch(f"candidates come from different image sizes: {sorted(shapes)}")
    if not shapes:
        raise DimensionMismatch("image size unknown: no candidates and no shape given")
    shape = shapes.pop()

    if scores is None:
        scores = tuple(model.predict(feature_matrix(c)) if len(c) else np.zeros(0) for c in (cand_a, cand_b))
    cands = [Candidate("A", m, float(s)) for m, s in zip(cand_a, scores[0])]
    cands += [Candidate("B", m, float(s)) for m, s in zip(cand_b, scores[1])]

    ranked = []
    for i, c in enumerate(cands):
        if c.score < cfg.score_threshold:
            c.status = "below_threshold"
        else:
            ranked.append(i)
    ranked.sort(key=lambda i: (-cands[i].score, cands[i].source, cands[i].instance.id))

    masks = [cands[i].instance for i in ranked]
    ious = iou_from_counts(pairwise_intersection(masks, masks), areas(masks), areas(masks))
    kept_pos: list[int] = []
    for p, i in enumerate(ranked):
        blockers = [q for q in kept_pos if ious[p, q] > cfg.nms_iou_threshold]
        if blockers:
            cands[i].status = "suppressed"
            cands[i].suppressed_by = ranked[blockers[0]]
        else:
            cands[i].status = "kept"
            kept_pos.append(p)

    kept = [ranked[p] for p in kept_pos]
    renamed = [cands[i].instance.with_id(n) for n, i in enumerate(kept, start=1)]
    survivors = resolve_overlaps(renamed)
    provenance, final = [], []
    for new_id, inst in enumerate(survivors, start=1):
        c = cands[kept[inst.id - 1]]
        provenance.append((new_id, c.source, c.instance.id, c.score))
        final.append(inst.with_id(new_id))
    return FusionResult(label_map_from_instances(final, *shape), cands, provenance)
