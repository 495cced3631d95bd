"""Mask data model and pixel-level primitives.

Label maps are plain 2-D integer numpy arrays (0 = background, k > 0 =
instance k); binary masks are boolean arrays. :class:`InstanceMask` is the
per-instance view used for matching, featurization and fusion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage as ndi

from .errors import BoundsError, DimensionMismatch, OverlapError

MAX_SIDE = 2**15
MAX_INSTANCES = 2**16 - 1

Connectivity = Literal[4, 8]


def structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndi.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndi.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """One instance: tight bounding box plus the bitmask inside it.

    ``bbox`` is ``(min_row, min_col, max_row, max_col)``, inclusive.
    ``shape`` is the owning image's ``(height, width)``.
    """

    id: int
    bbox: tuple[int, int, int, int]
    bits: np.ndarray
    shape: tuple[int, int]
    area: int = field(init=False)

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "area", int(bits.sum()))
        r0, c0, r1, c1 = self.bbox
        if bits.shape != (r1 - r0 + 1, c1 - c0 + 1):
            raise BoundsError(f"instance {self.id}: bits shape {bits.shape} does not match bbox {self.bbox}")

    @classmethod
    def from_mask(cls, id: int, mask: np.ndarray) -> "InstanceMask":
        """Build from a full-image boolean mask (must be nonempty)."""
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValueError(f"instance {id} is empty")
        r0, r1, c0, c1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
        return cls(int(id), (r0, c0, r1, c1), mask[r0:r1 + 1, c0:c1 + 1], mask.shape)

    @classmethod
    def from_coords(cls, id: int, rows, cols, shape: tuple[int, int]) -> "InstanceMask":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        bits = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
        bits[rows - r0, cols - c0] = True
        return cls(int(id), (int(r0), int(c0), int(r1), int(c1)), bits, tuple(shape))

    @property
    def slices(self) -> tuple[slice, slice]:
        r0, c0, r1, c1 = self.bbox
        return slice(r0, r1 + 1), slice(c0, c1 + 1)

    def to_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.slices] = self.bits
        return out

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Absolute (rows, cols) of the set pixels in raster order."""
        rr, cc = np.nonzero(self.bits)
        return rr + self.bbox[0], cc + self.bbox[1]

    def with_id(self, new_id: int) -> "InstanceMask":
        return InstanceMask(int(new_id), self.bbox, self.bits, self.shape)

    def __repr__(self):
        return f"InstanceMask(id={self.id}, bbox={self.bbox}, area={self.area})"


def check_label_map(label_map: np.ndarray) -> np.ndarray:
    lm = np.asarray(label_map)
    if lm.ndim != 2:
        raise DimensionMismatch(f"label map must be 2-D, got shape {lm.shape}")
    if not np.issubdtype(lm.dtype, np.integer):
        raise DimensionMismatch(f"label map must be integer typed, got {lm.dtype}")
    if lm.size and lm.min() < 0:
        raise BoundsError("label map contains negative values")
    if max(lm.shape) > MAX_SIDE:
        raise BoundsError(f"image side exceeds {MAX_SIDE}: {lm.shape}")
    return lm


def canonicalize(label_map: np.ndarray) -> np.ndarray:
    """Relabel to 1..n in raster order of each label's first pixel."""
    lm = check_label_map(label_map)
    flat = lm.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values != 0
    values, first = values[keep], first[keep]
    order = values[np.argsort(first, kind="stable")]
    lut = np.zeros(int(lm.max(initial=0)) + 1, dtype=np.int32)
    lut[order] = np.arange(1, order.size + 1, dtype=np.int32)
    return lut[lm].astype(np.int32)


def instances_from_label_map(label_map: np.ndarray) -> list[InstanceMask]:
    """One :class:`InstanceMask` per distinct nonzero label, ascending id."""
    lm = check_label_map(label_map)
    if lm.size == 0 or lm.max() == 0:
        return []
    lm = lm.astype(np.int64, copy=False)
    out = []
    for k, sl in enumerate(ndi.find_objects(lm), start=1):
        if sl is None:
            continue
        bits = lm[sl] == k
        out.append(InstanceMask(k, (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1), bits, lm.shape))
    return out


def label_map_from_instances(
    instances: Sequence[InstanceMask],
    height: int,
    width: int,
    overlap_policy: Literal["error", "lowest_id_wins"] = "error",
) -> np.ndarray:
    """Paint instances into a label map.

    Under ``"error"`` a pixel claimed by two instances raises
    :class:`OverlapError`; under ``"lowest_id_wins"`` the smaller id keeps it.
    """
    if overlap_policy not in ("error", "lowest_id_wins"):
        raise ValueError(f"unknown overlap_policy {overlap_policy!r}")
    out = np.zeros((height, width), dtype=np.int32)
    for inst in instances:
        r0, c0, r1, c1 = inst.bbox
        if r0 < 0 or c0 < 0 or r1 >= height or c1 >= width:
            raise BoundsError(f"instance {inst.id} bbox {inst.bbox} outside {height}x{width}")
        if inst.id < 1 or inst.id > MAX_INSTANCES:
            raise BoundsError(f"instance id {inst.id} outside 1..{MAX_INSTANCES}")
    if overlap_policy == "error":
        for inst in instances:
            window = out[inst.slices]
            clash = window[inst.bits] != 0
            if clash.any():
                r, c = np.argwhere(inst.bits & (window != 0))[0]
                raise OverlapError(
                    f"pixel ({r + inst.bbox[0]}, {c + inst.bbox[1]}) claimed by instances "
                    f"{int(window[r, c])} and {inst.id}"
                )
            window[inst.bits] = inst.id
    else:
        for inst in sorted(instances, key=lambda m: m.id, reverse=True):
            out[inst.slices][inst.bits] = inst.id
    return out


def connected_components(mask: np.ndarray, connectivity: Connectivity = 8) -> np.ndarray:
    """Label maximal connected foreground regions 1..n in raster order."""
    labels, _ = ndi.label(np.asarray(mask, dtype=bool), structure=structure(connectivity))
    return canonicalize(labels)


def structuring_element(radius: int, element: Literal["square", "disk"] = "square") -> np.ndarray:
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if element == "square":
        return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    if element == "disk":
        r = np.arange(-radius, radius + 1)
        return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius
    raise ValueError(f"unknown element {element!r}")


def morphology(
    mask: np.ndarray,
    op: Literal["dilate", "erode"],
    radius: int,
    element: Literal["square", "disk"] = "square",
) -> np.ndarray:
    """Binary dilation or erosion with a centered square or disk element.

    Pixels outside the image count as set for erosion, so the element
    is effectively clipped to the image on both operations.
    """
    mask = np.asarray(mask, dtype=bool)
    se = structuring_element(radius, element)
    if op == "dilate":
        return ndi.binary_dilation(mask, structure=se, border_value=0)
    if op == "erode":
        return ndi.binary_erosion(mask, structure=se, border_value=1)
    raise ValueError(f"unknown morphology op {op!r}")


def dilate(mask, radius=1, element="square"):
    return morphology(mask, "dilate", radius, element)


def erode(mask, radius=1, element="square"):
    return morphology(mask, "erode", radius, element)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background components (4-connected) that do not touch the border."""
    mask = np.asarray(mask, dtype=bool)
    return ndi.binary_fill_holes(mask, structure=structure(4))


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest background pixel.

    Background pixels get 0. A mask without any background maps to ``inf``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size and mask.all():
        return np.full(mask.shape, np.inf)
    return ndi.distance_transform_edt(mask)


def _check_same_shape(a: InstanceMask, b: InstanceMask):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionMismatch(f"instances {a.id} and {b.id} come from images {a.shape} vs {b.shape}")


def intersection(a: InstanceMask, b: InstanceMask) -> int:
    _check_same_shape(a, b)
    r0 = max(a.bbox[0], b.bbox[0])
    c0 = max(a.bbox[1], b.bbox[1])
    r1 = min(a.bbox[2], b.bbox[2])
    c1 = min(a.bbox[3], b.bbox[3])
    if r0 > r1 or c0 > c1:
        return 0
    wa = a.bits[r0 - a.bbox[0]:r1 - a.bbox[0] + 1, c0 - a.bbox[1]:c1 - a.bbox[1] + 1]
    wb = b.bits[r0 - b.bbox[0]:r1 - b.bbox[0] + 1, c0 - b.bbox[1]:c1 - b.bbox[1] + 1]
    return int(np.count_nonzero(wa & wb))


def iou(a: InstanceMask, b: InstanceMask) -> float:
    inter = intersection(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _bbox_array(instances: Sequence[InstanceMask]) -> np.ndarray:
    return np.array([m.bbox for m in instances], dtype=np.int64).reshape(-1, 4)


def pairwise_intersection(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask]) -> np.ndarray:
    """Integer matrix of pixel intersections, entry (i, j) = |preds[i] & gts[j]|."""
    out = np.zeros((len(preds), len(gts)), dtype=np.int64)
    if not preds or not gts:
        return out
    shapes = {tuple(m.shape) for m in list(preds) + list(gts)}
    if len(shapes) > 1:
        raise DimensionMismatch(f"instances come from different image sizes: {sorted(shapes)}")
    bp, bg = _bbox_array(preds), _bbox_array(gts)
    touch = (
        (bp[:, None, 0] <= bg[None, :, 2]) & (bg[None, :, 0] <= bp[:, None, 2])
        & (bp[:, None, 1] <= bg[None, :, 3]) & (bg[None, :, 1] <= bp[:, None, 3])
    )
    for i, j in zip(*np.nonzero(touch)):
        out[i, j] = intersection(preds[i], gts[j])
    return out


def iou_from_counts(inter: np.ndarray, area_a: np.ndarray, area_b: np.ndarray) -> np.ndarray:
    inter = np.asarray(inter, dtype=np.int64)
    union = np.asarray(area_a, dtype=np.int64)[:, None] + np.asarray(area_b, dtype=np.int64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / np.maximum(union, 1), 0.0)
    return out


def areas(instances: Iterable[InstanceMask]) -> np.ndarray:
    return np.array([m.area for m in instances], dtype=np.int64)


def pairwise_iou(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask]) -> np.ndarray:
    """IoU matrix with bbox prefiltering; equal to elementwise :func:`iou`."""
    inter = pairwise_intersection(preds, gts)
    return iou_from_counts(inter, areas(preds), areas(gts))


def foreground(instances: Iterable[InstanceMask], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in instances:
        out[m.slices] |= m.bits
    return out
