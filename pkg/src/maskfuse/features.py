"""Structural region properties and the fixed 11-column feature vector.

Conventions:

* centroid and second moments use pixel centers, with no +1/12 pixel
  extent correction;
* perimeter is the length of the outer contour traced through border-pixel
  centers (Moore-neighbour tracing, clockwise, starting at the raster-first
  pixel), axial steps 1 and diagonal steps sqrt(2). A region made of several
  8-connected pieces gets the sum of the pieces' contours;
* the convex hull is taken over pixel centers, and ``convex_area`` counts the
  pixel centers inside or on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import EmptyRegionError
from .mask_core import InstanceMask, structure

FEATURE_COLUMNS = (
    "area",
    "perimeter",
    "eccentricity",
    "major_axis",
    "minor_axis",
    "convex_area",
    "solidity",
    "bbox_extent",
    "equiv_diameter",
    "centroid_r",
    "centroid_c",
)
N_FEATURES = len(FEATURE_COLUMNS)

SQRT2 = math.sqrt(2.0)

# clockwise starting from west, in (drow, dcol)
_DIRS = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


@dataclass(frozen=True)
class RegionProperties:
    area: int
    perimeter: float
    centroid: tuple[float, float]
    bbox_extent: float
    eccentricity: float
    major_axis_length: float
    minor_axis_length: float
    convex_area: int
    solidity: float
    equivalent_diameter: float


def _trace_steps(padded: np.ndarray) -> tuple[int, int]:
    """Return (axial, diagonal) step counts of the outer contour of one piece."""
    start = tuple(int(v) for v in np.argwhere(padded)[0])
    cur = start
    back = 0  # west of the raster-first pixel is background
    first_next = None
    axial = diagonal = 0
    limit = 8 * int(padded.sum()) + 8
    for _ in range(limit):
        r, c = cur
        for step in range(1, 8):
            k = (back + step) % 8
            dr, dc = _DIRS[k]
            if padded[r + dr, c + dc]:
                break
        else:
            return 0, 0  # isolated pixel
        nxt = (r + dr, c + dc)
        if cur == start and first_next is not None and nxt == first_next:
            return axial, diagonal
        if first_next is None:
            first_next = nxt
        if k % 2:
            diagonal += 1
        else:
            axial += 1
        pr, pc = _DIRS[(k - 1) % 8]
        back = _DIR_INDEX[(pr - dr, pc - dc)]
        cur = nxt
    raise RuntimeError("contour tracing did not close")  # pragma: no cover


def contour_perimeter(bits: np.ndarray) -> float:
    bits = np.asarray(bits, dtype=bool)
    labels, n = ndi.label(bits, structure=structure(8))
    axial = diagonal = 0
    for k in range(1, n + 1):
        a, d = _trace_steps(np.pad(labels == k, 1))
        axial += a
        diagonal += d
    return axial + diagonal * SQRT2


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of integer (x, y) points, counter-clockwise, no collinear vertices."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.int64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def convex_area(bits: np.ndarray) -> int:
    """Count of pixel centers inside or on the hull of the set pixel centers."""
    rr, cc = np.nonzero(bits)
    hull = convex_hull(np.stack([cc, rr], axis=1))
    if len(hull) < 3:
        return int(rr.size)
    gy, gx = np.mgrid[0:bits.shape[0], 0:bits.shape[1]]
    inside = np.ones(bits.shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0) >= 0
    return int(inside.sum())


def _moments(rr: np.ndarray, cc: np.ndarray):
    """Exact integer second-moment sums scaled by n**2."""
    n = int(rr.size)
    sr, sc = int(rr.sum()), int(cc.sum())
    srr = int((rr * rr).sum())
    scc = int((cc * cc).sum())
    src = int((rr * cc).sum())
    return n, n * srr - sr * sr, n * scc - sc * sc, n * src - sr * sc


def compute_properties(inst: InstanceMask) -> RegionProperties:
    if inst.area < 1:
        raise EmptyRegionError(f"instance {inst.id} has no pixels")
    bits = inst.bits
    rr, cc = np.nonzero(bits)
    rr = rr.astype(np.int64)
    cc = cc.astype(np.int64)
    n, a, c, b = _moments(rr, cc)
    centroid = (inst.bbox[0] + float(rr.mean()), inst.bbox[1] + float(cc.mean()))

    # eigenvalues of [[a, b], [b, c]] / n**2, arranged to avoid cancellation
    disc = math.sqrt(float((a - c) ** 2 + 4 * b * b))
    trace = float(a + c)
    if trace > 0:
        lam1 = (trace + disc) / (2.0 * n * n)
        lam2 = 2.0 * float(a * c - b * b) / ((trace + disc) * n * n)
        ecc = math.sqrt(2.0 * disc / (trace + disc))
    else:
        lam1 = lam2 = 0.0
        ecc = 0.0
    lam2 = max(lam2, 0.0)

    hull_area = convex_area(bits)
    h, w = bits.shape
    return RegionProperties(
        area=n,
        perimeter=contour_perimeter(bits),
        centroid=centroid,
        bbox_extent=n / (h * w),
        eccentricity=min(ecc, 1.0),
        major_axis_length=4.0 * math.sqrt(lam1),
        minor_axis_length=4.0 * math.sqrt(lam2),
        convex_area=hull_area,
        solidity=n / hull_area,
        equivalent_diameter=math.sqrt(4.0 * n / math.pi),
    )


def feature_vector(props: RegionProperties, image_height: int, image_width: int) -> np.ndarray:
    return np.array(
        [
            props.area,
            props.perimeter,
            props.eccentricity,
            props.major_axis_length,
            props.minor_axis_length,
            props.convex_area,
            props.solidity,
            props.bbox_extent,
            props.equivalent_diameter,
            props.centroid[0] / image_height,
            props.centroid[1] / image_width,
        ],
        dtype=np.float64,
    )


def instance_features(inst: InstanceMask) -> np.ndarray:
    return feature_vector(compute_properties(inst), *inst.shape)


def feature_matrix(instances) -> np.ndarray:
    rows = [instance_features(m) for m in instances]
    if not rows:
        return np.zeros((0, N_FEATURES))
    return np.vstack(rows)

