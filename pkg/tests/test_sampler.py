import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpbank.errors import SamplingError
from kpbank.geometry import GridSpec
from kpbank.sampler import KeypointAnnotation, clutter_candidates, gather, keypoint_cells, sample_clutter

SPEC = GridSpec(64, 64, 4)


def ann(*points, visible=True):
    return [KeypointAnnotation(i, x, y, visible) for i, (x, y) in enumerate(points)]


def test_keypoint_cell_fixture():
    assert keypoint_cells(ann((17, 9)), SPEC) == {0: (4, 2)}


def test_invisible_keypoints_dropped():
    assert keypoint_cells(ann((1, 1), (5, 5), visible=False), SPEC) == {}


def test_shared_cell_reported_for_both():
    assert keypoint_cells(ann((1, 1), (2, 2)), SPEC) == {0: (0, 0), 1: (0, 0)}


def test_interior_candidate_count():
    assert len(clutter_candidates(ann((30, 30)), SPEC, 2)) == 24


def test_corner_candidate_count():
    assert len(clutter_candidates(ann((0, 0)), SPEC, 1)) == 3


def test_no_visible_keypoints_uniform():
    cells = sample_clutter(ann((5, 5), visible=False), SPEC, 30, 2, np.random.default_rng(0))
    assert len(set(cells)) == 30


def test_too_many_requested():
    with pytest.raises(SamplingError):
        sample_clutter(ann((5, 5)), GridSpec(8, 8, 4), 4, 2, np.random.default_rng(0))


def test_fallback_fills_from_rest_of_grid():
    rng = np.random.default_rng(1)
    cells = sample_clutter(ann((30, 30)), SPEC, 40, 2, rng)
    near = set(clutter_candidates(ann((30, 30)), SPEC, 2))
    assert near <= set(cells) and len(set(cells)) == 40


def test_reproducible():
    a = sample_clutter(ann((30, 30), (10, 50)), SPEC, 20, 2, np.random.default_rng(5))
    b = sample_clutter(ann((30, 30), (10, 50)), SPEC, 20, 2, np.random.default_rng(5))
    assert a == b


def test_gather_matches_index_loop():
    fmap = np.random.default_rng(0).normal(size=(16, 16, 4))
    cells = [(3, 7), (0, 0), (15, 2), (3, 7)]
    got = gather(fmap, cells)
    for vec, (c, r) in zip(got, cells):
        np.testing.assert_array_equal(vec, fmap[r, c])
    assert gather(fmap, []).shape == (0, 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 63.99), st.floats(0, 63.99), st.booleans()), min_size=0, max_size=8),
       st.integers(1, 40), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_sampling_properties(points, count, radius, seed):
    anns = [KeypointAnnotation(i, x, y, v) for i, (x, y, v) in enumerate(points)]
    kp = set(keypoint_cells(anns, SPEC).values())
    cells = sample_clutter(anns, SPEC, count, radius, np.random.default_rng(seed))
    assert len(cells) == count == len(set(cells))
    assert not kp.intersection(cells)
    near = clutter_candidates(anns, SPEC, radius)
    if len(near) >= count:
        for c, r in cells:
            assert any(max(abs(c - kc), abs(r - kr)) <= radius for kc, kr in kp)
