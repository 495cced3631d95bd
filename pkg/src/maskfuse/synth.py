"""Synthetic nuclei scenes and prediction degraders.

Two stock error profiles stand in for the two segmentation networks: the
"clumper" merges touching nuclei and jitters boundaries, the "splitter" cuts
nuclei in two and erodes them but rarely misses one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import ConfigError
from .mask_core import (
    InstanceMask,
    canonicalize,
    instances_from_label_map,
    label_map_from_instances,
    morphology,
    structure,
)
from .mask_io import write_label_png

MANIFEST_HEADER = ("ImageId", "GtPath", "PathA", "PathB", "SeedScene", "SeedA", "SeedB")

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Seed for stream ``index``: splitmix64 of master + index * golden gamma."""
    return splitmix64((master + index * 0x9E3779B97F4A7C15) & _MASK64)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 256
    width: int = 256
    nucleus_count_range: tuple[int, int] = (10, 40)
    semi_axis_range: tuple[float, float] = (4.0, 14.0)
    cluster_probability: float = 0.5
    seed: int = 0

    def validate(self):
        lo, hi = self.nucleus_count_range
        alo, ahi = self.semi_axis_range
        if self.height < 1 or self.width < 1:
            raise ConfigError("image dimensions must be positive")
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad nucleus_count_range {self.nucleus_count_range}")
        if not 1.0 <= alo <= ahi:
            raise ConfigError(f"bad semi_axis_range {self.semi_axis_range}")
        if not 0.0 <= self.cluster_probability <= 1.0:
            raise ConfigError("cluster_probability must be in [0, 1]")


@dataclass(frozen=True)
class ErrorProfile:
    name: str = "identity"
    p_drop: float = 0.0
    p_merge: float = 0.0
    merge_gap: int = 2
    p_split: float = 0.0
    boundary_jitter: int = 0
    erode_prob: float = 0.5
    p_spurious: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("p_drop", "p_merge", "p_split", "erode_prob", "p_spurious"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{self.name}: {name}={v} outside [0, 1]")
        if self.boundary_jitter < 0 or self.merge_gap < 1:
            raise ConfigError(f"{self.name}: boundary_jitter must be >= 0 and merge_gap >= 1")


CLUMPER = ErrorProfile(name="clumper", p_drop=0.05, p_merge=0.5, merge_gap=2, p_split=0.0,
                       boundary_jitter=1, erode_prob=0.5, p_spurious=0.3)
SPLITTER = ErrorProfile(name="splitter", p_drop=0.02, p_merge=0.0, merge_gap=2, p_split=0.3,
                        boundary_jitter=1, erode_prob=0.8, p_spurious=0.1)


def _ellipse(center, a, b, theta, shape):
    """Rows, cols and squared center distances of pixels inside a rotated ellipse."""
    cy, cx = center
    h, w = shape
    reach = int(math.ceil(a)) + 1
    r0, r1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    c0, c1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    if r0 >= r1 or c0 >= c1:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    dr, dc = rr - cy, cc - cx
    cos, sin = math.cos(theta), math.sin(theta)
    u = dc * cos + dr * sin
    v = -dc * sin + dr * cos
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return rr[inside], cc[inside], (dr * dr + dc * dc)[inside]


def _connected(bits: np.ndarray) -> bool:
    return ndi.label(bits, structure=structure(8))[1] <= 1


def generate_scene(cfg: SceneConfig) -> np.ndarray:
    """Label map of rotated elliptical nuclei, some placed in touching clusters.

    Pixels claimed by two ellipses go to the nearer center. Placements that
    leave any nucleus under 10 pixels or in pieces are re-sampled.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    lo, hi = cfg.nucleus_count_range
    target = int(rng.integers(lo, hi + 1))
    owner = np.zeros((h, w), dtype=np.int32)
    dist2 = np.full((h, w), np.inf)
    nuclei: list[tuple[float, float, float, float]] = []  # cy, cx, a, b
    amin, amax = cfg.semi_axis_range
    attempts = 0
    while len(nuclei) < target:
        attempts += 1
        if attempts > 200 * max(target, 1):
            raise ConfigError(f"could only place {len(nuclei)} of {target} nuclei in {h}x{w}")
        a = float(rng.uniform(amin, amax))
        b = max(amin * 0.75, a * float(rng.uniform(0.45, 1.0)))
        b = min(a, b)
        theta = float(rng.uniform(0.0, math.pi))
        clustered = bool(nuclei) and rng.random() < cfg.cluster_probability
        if clustered:
            k = int(rng.integers(len(nuclei)))
            ky, kx, ka, kb = nuclei[k]
            phi = float(rng.uniform(0.0, 2 * math.pi))
            d = float(rng.uniform(0.8, 1.2)) * ((a + b) / 2 + (ka + kb) / 2)
            center = (ky + d * math.sin(phi), kx + d * math.cos(phi))
        else:
            center = (float(rng.uniform(0, h)), float(rng.uniform(0, w)))
        rr, cc, d2 = _ellipse(center, a, b, theta, (h, w))
        if rr.size < 10:
            continue
        prev = owner[rr, cc]
        if not clustered and prev.any():
            continue
        take = d2 < dist2[rr, cc]
        new_id = len(nuclei) + 1
        if int(take.sum()) < 10:
            continue
        touched = np.unique(prev[take & (prev > 0)])
        saved_owner, saved_d2 = owner[rr, cc].copy(), dist2[rr, cc].copy()
        owner[rr[take], cc[take]] = new_id
        dist2[rr[take], cc[take]] = d2[take]
        ok = True
        for k in [new_id, *touched.tolist()]:
            rows, cols = np.nonzero(owner == k)
            if rows.size < 10:
                ok = False
                break
            window = owner[rows.min():rows.max() + 1, cols.min():cols.max() + 1] == k
            if not _connected(window):
                ok = False
                break
        if not ok:
            owner[rr, cc], dist2[rr, cc] = saved_owner, saved_d2
            continue
        nuclei.append((center[0], center[1], a, b))
    return canonicalize(owner)


def _split(inst: InstanceMask) -> list[np.ndarray]:
    """Cut a region across its minor axis (through the centroid)."""
    rr, cc = np.nonzero(inst.bits)
    if rr.size < 2:
        return [inst.to_mask()]
    r = rr - rr.mean()
    c = cc - cc.mean()
    cov = np.array([[np.mean(r * r), np.mean(r * c)], [np.mean(r * c), np.mean(c * c)]])
    _, vecs = np.linalg.eigh(cov)
    major = vecs[:, -1]
    side = r * major[0] + c * major[1] < 0
    if side.all() or not side.any():
        return [inst.to_mask()]
    parts = []
    for sel in (side, ~side):
        m = np.zeros(inst.shape, dtype=bool)
        m[rr[sel] + inst.bbox[0], cc[sel] + inst.bbox[1]] = True
        parts.append(m)
    return parts


def _neighbour_pairs(label_map: np.ndarray, gap: int) -> list[tuple[int, int]]:
    pairs = set()
    h, w = label_map.shape
    for inst in instances_from_label_map(label_map):
        r0, c0, r1, c1 = inst.bbox
        R0, C0, R1, C1 = max(r0 - gap, 0), max(c0 - gap, 0), min(r1 + gap, h - 1), min(c1 + gap, w - 1)
        window = np.zeros((R1 - R0 + 1, C1 - C0 + 1), dtype=bool)
        window[r0 - R0:r1 - R0 + 1, c0 - C0:c1 - C0 + 1] = inst.bits
        near = morphology(window, "dilate", gap, "square")
        for j in np.unique(label_map[R0:R1 + 1, C0:C1 + 1][near]):
            if j > inst.id:
                pairs.add((inst.id, int(j)))
    return sorted(pairs)


def degrade(gt: np.ndarray, profile: ErrorProfile) -> list[InstanceMask]:
    """Simulate a segmentation source: merge, split, jitter, drop, spurious (in that order).

    Output instances are pixel-disjoint with ids 1..n.
    """
    profile.validate()
    rng = np.random.default_rng(profile.seed)
    gt = np.asarray(gt)
    shape = gt.shape
    insts = instances_from_label_map(gt)

    # merges
    parent = {m.id: m.id for m in insts}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in _neighbour_pairs(gt, profile.merge_gap):
        if rng.random() < profile.p_merge:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[InstanceMask]] = {}
    for m in insts:
        groups.setdefault(find(m.id), []).append(m)
    masks = []
    for root in sorted(groups):
        members = groups[root]
        union = np.zeros(shape, dtype=bool)
        for m in members:
            union[m.slices] |= m.bits
        if len(members) > 1:
            closed = morphology(morphology(union, "dilate", 1), "erode", 1)
            union |= closed & (gt == 0)
        masks.append(union)

    # splits
    split_masks = []
    for mask in masks:
        if rng.random() < profile.p_split:
            split_masks += _split(InstanceMask.from_mask(0, mask))
        else:
            split_masks.append(mask)

    # boundary jitter: dilation only grows into unclaimed pixels
    occupied = np.zeros(shape, dtype=bool)
    for m in split_masks:
        occupied |= m
    jittered = []
    for mask in split_masks:
        radius = int(rng.integers(0, profile.boundary_jitter + 1)) if profile.boundary_jitter else 0
        erode_it = rng.random() < profile.erode_prob
        if radius > 0:
            if erode_it:
                new = morphology(mask, "erode", radius) & mask
                occupied &= ~(mask & ~new)
            else:
                new = morphology(mask, "dilate", radius) & (mask | ~occupied)
                occupied |= new
            mask = new
        if mask.any():
            jittered.append(mask)

    # drops
    kept = [m for m in jittered if not rng.random() < profile.p_drop]

    # spurious blob
    if rng.random() < profile.p_spurious:
        a = float(rng.uniform(2.0, 4.5))
        b = float(rng.uniform(2.0, a))
        center = (float(rng.uniform(0, shape[0])), float(rng.uniform(0, shape[1])))
        rr, cc, _ = _ellipse(center, a, b, float(rng.uniform(0, math.pi)), shape)
        taken = np.zeros(shape, dtype=bool)
        for m in kept:
            taken |= m
        blob = np.zeros(shape, dtype=bool)
        blob[rr, cc] = True
        blob &= ~taken
        if blob.any():
            kept.append(blob)

    return [InstanceMask.from_mask(k, m) for k, m in enumerate(kept, start=1)]


@dataclass
class CorpusImage:
    image_id: str
    gt: np.ndarray
    pred_a: np.ndarray
    pred_b: np.ndarray
    seed_scene: int
    seed_a: int
    seed_b: int


def make_image(index: int, master_seed: int, scene_cfg: SceneConfig, profile_a: ErrorProfile,
               profile_b: ErrorProfile) -> CorpusImage:
    s_scene = derive_seed(master_seed, 3 * index)
    s_a = derive_seed(master_seed, 3 * index + 1)
    s_b = derive_seed(master_seed, 3 * index + 2)
    gt = generate_scene(replace(scene_cfg, seed=s_scene))
    h, w = gt.shape
    pa = label_map_from_instances(degrade(gt, replace(profile_a, seed=s_a)), h, w)
    pb = label_map_from_instances(degrade(gt, replace(profile_b, seed=s_b)), h, w)
    return CorpusImage(f"img{index:04d}", gt, pa, pb, s_scene, s_a, s_b)


def generate_corpus(n_images: int, master_seed: int = 42, scene_cfg: SceneConfig = SceneConfig(),
                    profile_a: ErrorProfile = CLUMPER, profile_b: ErrorProfile = SPLITTER,
                    pmap=map) -> list[CorpusImage]:
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    scene_cfg.validate()
    profile_a.validate()
    profile_b.validate()
    return list(pmap(lambda i: make_image(i, master_seed, scene_cfg, profile_a, profile_b), range(n_images)))


def make_corpus(n_images: int, scene_cfg: SceneConfig, profile_a: ErrorProfile, profile_b: ErrorProfile,
                out_dir, master_seed: int = 42, pmap=map) -> list[dict]:
    """Write ``gt/``, ``A/``, ``B/`` label-map PNGs and ``manifest.csv``."""
    out = Path(out_dir)
    for sub in ("gt", "A", "B"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for img in generate_corpus(n_images, master_seed, scene_cfg, profile_a, profile_b, pmap):
        paths = {sub: f"{sub}/{img.image_id}.png" for sub in ("gt", "A", "B")}
        write_label_png(out / paths["gt"], img.gt)
        write_label_png(out / paths["A"], img.pred_a)
        write_label_png(out / paths["B"], img.pred_b)
        rows.append({
            "ImageId": img.image_id, "GtPath": paths["gt"], "PathA": paths["A"], "PathB": paths["B"],
            "SeedScene": img.seed_scene, "SeedA": img.seed_a, "SeedB": img.seed_b,
        })
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def profile_dict(profile: ErrorProfile) -> dict:
    return asdict(profile)
