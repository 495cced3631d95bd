import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from maskfuse.errors import BoundsError, OverlapError
from maskfuse.mask_core import (
    InstanceMask,
    canonicalize,
    connected_components,
    distance_transform,
    fill_holes,
    instances_from_label_map,
    intersection,
    iou,
    label_map_from_instances,
    morphology,
    pairwise_iou,
)

from conftest import random_instance, random_label_map
from oracles import brute_distance, pixel_set, union_find_count

bool_masks = arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


def inst(id, pixels, shape=(4, 4)):
    rows, cols = zip(*pixels)
    return InstanceMask.from_coords(id, rows, cols, shape)


# --- instances <-> label maps -------------------------------------------------

def test_empty_map_has_no_instances():
    assert instances_from_label_map(np.zeros((4, 4), int)) == []


def test_single_label_seven():
    lm = np.zeros((4, 4), int)
    lm[1, 1:4] = 7
    (m,) = instances_from_label_map(lm)
    assert (m.id, m.area, m.bbox) == (7, 3, (1, 1, 1, 3))


def test_round_trip_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        lm = random_label_map(rng, 32, 32, 5)
        inst_list = instances_from_label_map(lm)
        assert [m.id for m in inst_list] == sorted(m.id for m in inst_list)
        back = label_map_from_instances(inst_list, 32, 32)
        np.testing.assert_array_equal(back, lm)


def test_paint_empty_and_disjoint():
    assert not label_map_from_instances([], 3, 5).any()
    lm = label_map_from_instances([inst(2, [(0, 0)]), inst(5, [(3, 3), (3, 2)])], 4, 4)
    assert lm[0, 0] == 2 and lm[3, 3] == 5 and lm[3, 2] == 5 and (lm > 0).sum() == 3


def test_overlap_policies():
    a, b = inst(4, [(0, 0), (0, 1)]), inst(2, [(0, 1), (0, 2)])
    with pytest.raises(OverlapError):
        label_map_from_instances([a, b], 4, 4, overlap_policy="error")
    lm = label_map_from_instances([a, b], 4, 4, overlap_policy="lowest_id_wins")
    assert lm[0].tolist() == [4, 2, 2, 0]


def test_out_of_bounds():
    with pytest.raises(BoundsError):
        label_map_from_instances([inst(1, [(5, 5)], shape=(8, 8))], 4, 4)


def test_canonicalize_raster_order():
    lm = np.array([[0, 9, 9], [3, 0, 9], [3, 5, 0]])
    assert canonicalize(lm).tolist() == [[0, 1, 1], [2, 0, 1], [2, 3, 0]]


# --- connected components -----------------------------------------------------

def test_components_trivial_and_diagonal():
    assert connected_components(np.zeros((5, 5), bool)).max() == 0
    diag = np.eye(2, dtype=bool)
    assert connected_components(diag, 4).max() == 2
    assert connected_components(diag, 8).max() == 1


def test_components_match_union_find():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = rng.random((64, 64)) < rng.uniform(0.2, 0.6)
        for conn in (4, 8):
            assert connected_components(m, conn).max() == union_find_count(m, conn)


@given(bool_masks)
def test_components_raster_order(m):
    lab = connected_components(m, 8)
    firsts = [np.flatnonzero(lab.ravel() == k)[0] for k in range(1, lab.max() + 1)]
    assert firsts == sorted(firsts)
    assert ((lab > 0) == m).all()


def test_component_count_independent_of_instance_ids():
    rng = np.random.default_rng(2)
    lm = random_label_map(rng, 40, 40, 8)
    perm = np.concatenate([[0], rng.permutation(np.arange(1, lm.max() + 1))])
    assert connected_components(perm[lm] > 0).max() == connected_components(lm > 0).max()


# --- morphology ---------------------------------------------------------------

def test_dilate_point_and_erode_block():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    d = morphology(m, "dilate", 1, "square")
    assert d.sum() == 9 and d[1:4, 1:4].all()
    assert morphology(d, "erode", 1, "square").tolist() == m.tolist()


def test_disk_element():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    d = morphology(m, "dilate", 2, "disk")
    expected = {(r, c) for r in range(7) for c in range(7) if (r - 3) ** 2 + (c - 3) ** 2 <= 4}
    assert set(map(tuple, np.argwhere(d).tolist())) == expected


def test_closing_contains_original():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m = rng.random((20, 20)) < 0.3
        r = int(rng.integers(1, 3))
        el = ["square", "disk"][int(rng.integers(0, 2))]
        closed = morphology(morphology(m, "dilate", r, el), "erode", r, el)
        assert (closed >= m).all()


def test_morphology_rejects_zero_radius():
    with pytest.raises(ValueError):
        morphology(np.ones((3, 3), bool), "dilate", 0)


# --- hole filling -------------------------------------------------------------

def test_fill_holes_cases():
    solid = np.zeros((6, 6), bool)
    solid[1:5, 1:5] = True
    assert (fill_holes(solid) == solid).all()
    ring = solid.copy()
    ring[2:4, 2:4] = False
    assert (fill_holes(ring) == solid).all()
    c_shape = ring.copy()
    c_shape[2:4, 4:6] = False  # opens the hole towards the right border
    assert (fill_holes(c_shape) == c_shape).all()


def test_fill_holes_diagonal_gap_is_a_hole():
    # 4-connected background: a hole touching the outside only diagonally is still a hole
    m = np.ones((4, 4), bool)
    m[0, 0] = False
    m[1, 1] = False
    out = fill_holes(m)
    assert out[1, 1] and not out[0, 0]


# --- distance transform -------------------------------------------------------

def test_distance_trivial_cases():
    assert not distance_transform(np.zeros((4, 4), bool)).any()
    one = np.zeros((5, 5), bool)
    one[2, 2] = True
    assert distance_transform(one)[2, 2] == 1.0
    assert np.isinf(distance_transform(np.ones((3, 3), bool))).all()


@pytest.mark.parametrize("seed", range(50))
def test_distance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((48, 48)) < rng.uniform(0.3, 0.95)
    np.testing.assert_array_equal(distance_transform(m), brute_distance(m))


@given(bool_masks)
def test_distance_lipschitz(m):
    d = distance_transform(m)
    if np.isinf(d).any():
        return
    assert ((d == 0) == ~m).all()
    assert np.all(np.abs(np.diff(d, axis=0)) <= 1 + 1e-12)
    assert np.all(np.abs(np.diff(d, axis=1)) <= 1 + 1e-12)


# --- IoU ----------------------------------------------------------------------

def test_iou_examples():
    a, b = inst(1, [(0, 0), (0, 1)]), inst(2, [(0, 1), (0, 2)])
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, a) == 1.0
    assert iou(a, inst(3, [(3, 3)])) == 0.0


def test_pairwise_trivial():
    assert pairwise_iou([], []).shape == (0, 0)
    a = inst(1, [(0, 0), (1, 1)])
    assert pairwise_iou([a], [a]).tolist() == [[1.0]]


def test_pairwise_matches_elementwise():
    rng = np.random.default_rng(4)
    preds = [random_instance(rng, (30, 30), 60, id=i + 1) for i in range(20)]
    gts = [random_instance(rng, (30, 30), 60, id=i + 1) for i in range(20)]
    mat = pairwise_iou(preds, gts)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            assert mat[i, j] == iou(p, g)
            ps, gs = pixel_set(p), pixel_set(g)
            assert intersection(p, g) == len(ps & gs)


@given(st.integers(0, 2**32 - 1))
def test_iou_properties(seed):
    rng = np.random.default_rng(seed)
    a = random_instance(rng, (12, 12), 40, id=1)
    b = random_instance(rng, (12, 12), 40, id=2)
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert intersection(a, b) <= min(a.area, b.area)
    assert iou(a, a) == 1.0
    if v == 1.0:
        assert pixel_set(a) == pixel_set(b)
    assert math.isfinite(v)
