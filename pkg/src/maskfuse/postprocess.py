"""Turn raw prediction channels into clean, pixel-disjoint instance sets."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage as ndi

from .errors import DimensionMismatch
from .mask_core import (
    InstanceMask,
    canonicalize,
    connected_components,
    distance_transform,
    fill_holes,
    instances_from_label_map,
    label_map_from_instances,
)


@dataclass(frozen=True)
class WatershedConfig:
    flood_connectivity: Literal[4, 8] = 4
    markerless_policy: Literal["new_label", "drop"] = "new_label"

    def __post_init__(self):
        if self.flood_connectivity not in (4, 8):
            raise ValueError(f"flood_connectivity must be 4 or 8, got {self.flood_connectivity}")
        if self.markerless_policy not in ("new_label", "drop"):
            raise ValueError(f"unknown markerless_policy {self.markerless_policy!r}")


@dataclass(frozen=True)
class CleanConfig:
    min_area: int = 10
    fill_holes: bool = True
    watershed: WatershedConfig = field(default_factory=WatershedConfig)


def remove_small(instances: Sequence[InstanceMask], min_area: int = 10) -> list[InstanceMask]:
    """Keep instances with ``area >= min_area``, preserving order."""
    return [m for m in instances if m.area >= min_area]


_OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def watershed_split(
    mask: np.ndarray,
    borders: np.ndarray,
    cfg: WatershedConfig = WatershedConfig(),
    elevation: np.ndarray | None = None,
) -> np.ndarray:
    """Marker-controlled priority flood restricted to ``mask``.

    Markers are the 8-connected components of ``mask & ~borders``. The
    default elevation is the negated exact distance transform of ``mask``;
    pass ``elevation`` to flood a network probability map instead. Ties in
    elevation are broken by enqueue order.
    """
    mask = np.asarray(mask, dtype=bool)
    borders = np.asarray(borders, dtype=bool)
    if mask.shape != borders.shape:
        raise DimensionMismatch(f"mask {mask.shape} and borders {borders.shape} differ in size")
    if elevation is None:
        elevation = -distance_transform(mask)
    elif np.shape(elevation) != mask.shape:
        raise DimensionMismatch(f"elevation {np.shape(elevation)} and mask {mask.shape} differ in size")
    h, w = mask.shape
    labels = connected_components(mask & ~borders, 8)
    queued = labels > 0
    elev = np.asarray(elevation, dtype=np.float64).tolist()
    offsets = _OFFSETS[cfg.flood_connectivity]
    heap: list = []
    counter = 0

    def push_neighbors(r, c, lab):
        nonlocal counter
        for dr, dc in offsets:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not queued[nr, nc]:
                queued[nr, nc] = True
                heapq.heappush(heap, (elev[nr][nc], counter, nr, nc, lab))
                counter += 1

    # only marker pixels next to unqueued mask pixels can seed the frontier
    frontier = (labels > 0) & ndi.binary_dilation(mask & ~queued, structure=np.ones((3, 3), bool))
    for r, c in zip(*np.nonzero(frontier)):
        push_neighbors(int(r), int(c), int(labels[r, c]))
    while heap:
        _, _, r, c, lab = heapq.heappop(heap)
        labels[r, c] = lab
        push_neighbors(r, c, lab)

    leftover = mask & (labels == 0)
    if leftover.any() and cfg.markerless_policy == "new_label":
        extra = connected_components(leftover, 8)
        labels = np.where(extra > 0, extra + labels.max(), labels)
    return canonicalize(labels)


def resolve_overlaps(instances: Sequence[InstanceMask]) -> list[InstanceMask]:
    """Split pixels claimed by several instances by distance to each claimant's
    exclusive pixels.

    A contested pixel goes to the contender whose nearest exclusive pixel is
    closest (Euclidean); ties go to the lower id. Contenders without exclusive
    pixels lose every contested pixel unless no contender has any, in which
    case the lowest id keeps it. Instances left empty are dropped.
    """
    instances = list(instances)
    if len(instances) < 2:
        return instances
    shapes = {tuple(m.shape) for m in instances}
    if len(shapes) > 1:
        raise DimensionMismatch(f"instances come from different image sizes: {sorted(shapes)}")
    shape = shapes.pop()
    cover = np.zeros(shape, dtype=np.int32)
    for m in instances:
        cover[m.slices] += m.bits
    if cover.max() < 2:
        return instances

    best_d = np.full(shape, np.inf)
    best_key = np.full(shape, -1, dtype=np.int64)
    order = sorted(range(len(instances)), key=lambda i: (instances[i].id, i))
    rank = {i: k for k, i in enumerate(order)}
    for i in order:
        m = instances[i]
        window = cover[m.slices]
        contested = m.bits & (window >= 2)
        if not contested.any():
            continue
        exclusive = m.bits & (window == 1)
        if exclusive.any():
            d = ndi.distance_transform_edt(~exclusive)
        else:
            d = np.full(m.bits.shape, np.inf)
        bd = best_d[m.slices]
        bk = best_key[m.slices]
        take = contested & ((d < bd) | (bk < 0))
        bd[take] = d[take]
        bk[take] = rank[i]

    out = []
    for i, m in enumerate(instances):
        window = cover[m.slices]
        lose = m.bits & (window >= 2) & (best_key[m.slices] != rank[i])
        if not lose.any():
            out.append(m)
            continue
        bits = m.bits & ~lose
        if bits.any():
            full = np.zeros(shape, dtype=bool)
            full[m.slices] = bits
            out.append(InstanceMask.from_mask(m.id, full))
    return out


def fill_instance_holes(inst: InstanceMask) -> InstanceMask:
    filled = fill_holes(inst.bits)
    if filled.sum() == inst.area:
        return inst
    return InstanceMask(inst.id, inst.bbox, filled, inst.shape)


def clean_pipeline(raw, cfg: CleanConfig = CleanConfig(), borders: np.ndarray | None = None,
                   elevation: np.ndarray | None = None) -> list[InstanceMask]:
    """Hole filling, optional watershed split, overlap resolution and small-mask removal.

    ``raw`` is a label map, a list of (possibly overlapping) instances, or,
    when ``borders`` is given, a nuclei mask whose nonzero pixels are flooded.
    """
    if borders is not None:
        mask = np.asarray(raw) > 0
        if cfg.fill_holes:
            mask = fill_holes(mask)
        instances = instances_from_label_map(watershed_split(mask, borders, cfg.watershed, elevation))
    else:
        instances = instances_from_label_map(raw) if isinstance(raw, np.ndarray) else list(raw)
        if cfg.fill_holes:
            instances = [fill_instance_holes(m) for m in instances]
    instances = resolve_overlaps(instances)
    return remove_small(instances, cfg.min_area)


def to_label_map(instances: Sequence[InstanceMask], shape: tuple[int, int]) -> np.ndarray:
    """Paint disjoint instances and canonicalize ids to 1..n."""
    return canonicalize(label_map_from_instances(instances, *shape, overlap_policy="error"))
