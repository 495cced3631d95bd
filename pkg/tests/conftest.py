import numpy as np
import pytest
from hypothesis import settings

from maskfuse.mask_core import InstanceMask, canonicalize, instances_from_label_map

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_label_map(rng, h, w, n_labels, fill=0.6):
    """Blocky random label map with up to ``n_labels`` canonical instances."""
    lab = np.zeros((h, w), dtype=np.int64)
    for k in range(1, n_labels + 1):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(1, max(2, h // 3)), rng.integers(1, max(2, w // 3))
        blob = rng.random((min(rh, h - r0), min(rw, w - c0))) < fill
        win = lab[r0:r0 + blob.shape[0], c0:c0 + blob.shape[1]]
        win[blob & (win == 0)] = k
    return canonicalize(lab)


def random_instance(rng, shape, max_px=400, id=1):
    """One random 8-connected-ish blob grown from a seed pixel."""
    h, w = shape
    target = int(rng.integers(1, max_px + 1))
    r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
    pix = {(r, c)}
    frontier = [(r, c)]
    while len(pix) < target and frontier:
        pr, pc = frontier[int(rng.integers(0, len(frontier)))]
        dr, dc = rng.integers(-1, 2, size=2)
        q = (pr + int(dr), pc + int(dc))
        if 0 <= q[0] < h and 0 <= q[1] < w and q not in pix:
            pix.add(q)
            frontier.append(q)
        elif rng.random() < 0.05:
            frontier.remove((pr, pc))
    rows, cols = zip(*pix)
    return InstanceMask.from_coords(id, rows, cols, shape)


def random_scene(rng, shape, max_instances):
    """(preds, gts) where preds perturb gts: shifted, trimmed, merged or spurious."""
    h, w = shape
    gt_map = random_label_map(rng, h, w, int(rng.integers(0, max_instances + 1)), fill=0.8)
    gts = instances_from_label_map(gt_map)[:max_instances]
    pred_map = np.zeros_like(gt_map)
    for g in gts:
        m = g.to_mask()
        roll = rng.random()
        if roll < 0.15:
            continue
        if roll < 0.6:
            m = np.roll(m, tuple(rng.integers(-1, 2, size=2)), axis=(0, 1))
        elif roll < 0.8:
            m &= rng.random(m.shape) < 0.8
        pred_map[m & (pred_map == 0)] = g.id
    if rng.random() < 0.5:
        r0, c0 = rng.integers(0, h - 3), rng.integers(0, w - 3)
        spot = pred_map[r0:r0 + 4, c0:c0 + 4]
        spot[spot == 0] = pred_map.max() + 1
    preds = instances_from_label_map(canonicalize(pred_map))[:max_instances]
    return preds, gts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
