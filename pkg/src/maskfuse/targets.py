"""Two-channel training targets for a border-aware semantic segmentation net."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mask_core import instances_from_label_map, morphology


@dataclass(frozen=True)
class UnetTargets:
    nuclei: np.ndarray
    borders: np.ndarray
    radius: int = 1


def make_unet_targets(gt: np.ndarray, radius: int = 1) -> UnetTargets:
    """Nuclei channel = union of instances; borders channel = pixels covered by
    two or more instances after each is dilated on its own (square element).

    Border pixels stay set in the nuclei channel.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    gt = np.asarray(gt)
    h, w = gt.shape
    cover = np.zeros((h, w), dtype=np.int32)
    for inst in instances_from_label_map(gt):
        r0, c0, r1, c1 = inst.bbox
        R0, C0 = max(r0 - radius, 0), max(c0 - radius, 0)
        R1, C1 = min(r1 + radius, h - 1), min(c1 + radius, w - 1)
        window = np.zeros((R1 - R0 + 1, C1 - C0 + 1), dtype=bool)
        window[r0 - R0:r1 - R0 + 1, c0 - C0:c1 - C0 + 1] = inst.bits
        cover[R0:R1 + 1, C0:C1 + 1] += morphology(window, "dilate", radius, "square")
    return UnetTargets(nuclei=gt > 0, borders=cover >= 2, radius=radius)
