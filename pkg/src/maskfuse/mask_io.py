"""Bit-exact mask file formats: 16-bit PNG label maps and Kaggle-style RLE CSV."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .errors import FormatError
from .mask_core import MAX_INSTANCES, canonicalize, check_label_map

RLE_HEADER = ("ImageId", "EncodedPixels")


def write_label_png(path, label_map: np.ndarray) -> None:
    lm = check_label_map(label_map)
    if lm.size and lm.max() > MAX_INSTANCES:
        raise FormatError(f"{path}: label {int(lm.max())} does not fit in 16 bits")
    Image.fromarray(lm.astype(np.uint16)).save(path, format="PNG")


def write_binary_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a single-channel PNG as an integer array (8- or 16-bit)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "I;16", "I;16B", "I", "P"):
                raise FormatError(f"{path}: expected single-channel image, got mode {im.mode}")
            arr = np.array(im)
    except OSError as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: unreadable PNG ({exc})") from exc
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected 2-D image, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_INSTANCES):
        bad = np.argwhere((arr < 0) | (arr > MAX_INSTANCES))[0]
        raise FormatError(f"{path}: pixel ({bad[0]}, {bad[1]}) value {arr[tuple(bad)]} outside 16-bit range")
    return arr.astype(np.int32)


def rle_encode(mask: np.ndarray) -> str:
    """Encode a binary mask as 1-based column-major ``start length`` pairs."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[0::2], edges[1::2]
    return " ".join(f"{s + 1} {e - s}" for s, e in zip(starts, ends))


def rle_decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    height, width = shape
    n = height * width
    flat = np.zeros(n, dtype=bool)
    tokens = rle.split()
    if len(tokens) % 2:
        raise FormatError(f"odd number of RLE tokens ({len(tokens)})")
    try:
        nums = np.array([int(t) for t in tokens], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"non-integer RLE token: {exc}") from exc
    prev_end = 0
    for start, length in nums:
        if start < 1 or length < 1 or start - 1 + length > n:
            raise FormatError(f"RLE run ({start}, {length}) outside image of {n} pixels")
        if start - 1 < prev_end:
            raise FormatError(f"RLE runs not sorted/non-overlapping at start {start}")
        flat[start - 1:start - 1 + length] = True
        prev_end = start - 1 + length
    return flat.reshape((height, width), order="F")


def label_map_to_rle_rows(image_id: str, label_map: np.ndarray) -> list[tuple[str, str]]:
    lm = check_label_map(label_map)
    ids = [int(v) for v in np.unique(lm) if v != 0]
    if not ids:
        return [(image_id, "")]
    return [(image_id, rle_encode(lm == k)) for k in ids]


def write_rle_csv(path, label_maps: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RLE_HEADER)
        for image_id in sorted(label_maps):
            w.writerows(label_map_to_rle_rows(image_id, label_maps[image_id]))


def read_rle_csv(path, shapes: Mapping[str, tuple[int, int]] | tuple[int, int]) -> dict[str, np.ndarray]:
    """Read an RLE CSV into canonical label maps.

    ``shapes`` maps image id to ``(height, width)``, or is one shape for all.
    Rows with empty ``EncodedPixels`` declare an image with no instances.
    """
    rows: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RLE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(RLE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            rows.setdefault(row[0], []).append(row[1])
    out = {}
    for image_id, encs in rows.items():
        shape = shapes if isinstance(shapes, tuple) else shapes.get(image_id)
        if shape is None:
            raise FormatError(f"{path}: no image size known for {image_id!r}")
        lm = np.zeros(shape, dtype=np.int32)
        k = 0
        for enc in encs:
            if not enc.strip():
                continue
            k += 1
            try:
                m = rle_decode(enc, shape)
            except FormatError as exc:
                raise FormatError(f"{path}: image {image_id!r}: {exc}") from exc
            clash = m & (lm != 0)
            if clash.any():
                r, c = np.argwhere(clash)[0]
                raise FormatError(f"{path}: image {image_id!r}: pixel ({r}, {c}) claimed by two instances")
            lm[m] = k
        out[image_id] = canonicalize(lm)
    return dict(sorted(out.items()))


def image_id_of(path) -> str:
    stem = Path(path).stem
    for suffix in ("_nuclei", "_borders"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def read_png_dir(directory, suffix: str = "") -> dict[str, np.ndarray]:
    """Read every ``<id><suffix>.png`` in a directory, keyed by image id.

    Without a suffix, ``*_borders.png`` files are skipped and a trailing
    ``_nuclei`` is stripped from the id.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    out = {}
    for p in sorted(directory.glob(f"*{suffix}.png")):
        if suffix:
            image_id = p.stem[: len(p.stem) - len(suffix)]
        elif p.stem.endswith("_borders"):
            continue
        else:
            image_id = image_id_of(p)
        out[image_id] = read_png(p)
    return out


def read_label_maps(path, fmt: str = "png16", shapes=None) -> dict[str, np.ndarray]:
    if fmt == "png16":
        return read_png_dir(path)
    if fmt == "rle":
        if shapes is None:
            raise FormatError("reading RLE masks needs image sizes (--shape or a PNG ground truth)")
        return read_rle_csv(path, shapes)
    raise FormatError(f"unknown mask format {fmt!r}")


def write_label_maps(path, label_maps: Mapping[str, np.ndarray], fmt: str = "png16") -> None:
    if fmt == "png16":
        os.makedirs(path, exist_ok=True)
        for image_id in sorted(label_maps):
            write_label_png(Path(path) / f"{image_id}.png", label_maps[image_id])
    elif fmt == "rle":
        parent = Path(path).parent
        parent.mkdir(parents=True, exist_ok=True)
        write_rle_csv(path, label_maps)
    else:
        raise FormatError(f"unknown mask format {fmt!r}")
