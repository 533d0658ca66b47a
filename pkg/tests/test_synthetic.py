import math

import numpy as np
import pytest

from kpbank.errors import DataIOError, GenerationError
from kpbank.synthetic import (OCCLUSION_BANDS, GeneratorConfig, apply_occlusion, dataset_checksum, generate_scene,
                              generate_split, occluded_copies, read_dataset, wheel_patch_correlation, write_dataset)

CFG = GeneratorConfig(seed=1)


@pytest.fixture(scope="module")
def scenes():
    return generate_split(CFG, 30, "t")


def test_deterministic():
    a, b = generate_scene(CFG, 7), generate_scene(CFG, 7)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.annotations == b.annotations and a.bbox == b.bbox
    assert not np.array_equal(a.image, generate_scene(CFG, 8).image)


def test_level_zero(scenes):
    for s in scenes:
        assert s.level == 0 and s.occluded_fraction == 0.0
        assert s.image.dtype == np.float32 and s.image.shape == (64, 64, 3)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_keypoints_on_mask(scenes):
    for s in scenes:
        assert len(s.annotations) == 8
        for a in s.annotations:
            assert a.visible
            assert s.mask[int(math.floor(a.y)), int(math.floor(a.x))]


def test_distractors_off_object_and_ambiguous(scenes):
    for s in scenes:
        assert 1 <= len(s.distractor_centers) <= 2
        for i, (x, y) in enumerate(s.distractor_centers):
            assert not s.mask[int(y), int(x)]
            assert wheel_patch_correlation(s, i) > 0.9


@pytest.mark.parametrize("level", [1, 2, 3])
def test_occlusion_bands(scenes, level):
    lo, hi = OCCLUSION_BANDS[level]
    for s in occluded_copies(scenes, level, seed=3):
        assert lo <= s.occluded_fraction <= hi
        assert s.level == level and s.scene_id.endswith(f"_lv{level}")


def test_occlusion_stays_in_bbox_and_hides_keypoints(scenes):
    rng = np.random.default_rng(0)
    for s in scenes[:10]:
        occ = apply_occlusion(s, 2, rng)
        h, w, x0, y0 = s.bbox
        changed = np.any(occ.image != s.image, axis=2)
        outside = np.ones_like(changed)
        outside[y0:y0 + h, x0:x0 + w] = False
        assert not np.any(changed & outside)
        for a, b in zip(s.annotations, occ.annotations):
            assert (a.x, a.y) == (b.x, b.y)
            if changed[int(math.floor(a.y)), int(math.floor(a.x))]:
                assert not b.visible


def test_level_zero_occlusion_is_identity(scenes):
    s = scenes[0]
    out = apply_occlusion(s, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, s.image)
    assert out.annotations == s.annotations and out.image is not s.image


def test_unreachable_band():
    with pytest.raises(GenerationError):
        apply_occlusion(generate_scene(CFG, 0), 3, np.random.default_rng(0), max_patches=1, max_attempts=1)
    with pytest.raises(GenerationError):
        apply_occlusion(generate_scene(CFG, 0), 4, np.random.default_rng(0))


def test_round_trip(tmp_path, scenes):
    occ = occluded_copies(scenes[:5], 1, seed=0)
    write_dataset(scenes[:5] + occ, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert len((tmp_path / "d" / "manifest.jsonl").read_text().splitlines()) == 10
    for a, b in zip(scenes[:5] + occ, back):
        assert a.scene_id == b.scene_id and a.annotations == b.annotations
        assert a.bbox == b.bbox and a.level == b.level and a.occluded_fraction == b.occluded_fraction
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_checksum_reproducible(tmp_path):
    write_dataset(generate_split(CFG, 4, "c"), tmp_path / "a")
    write_dataset(generate_split(CFG, 4, "c"), tmp_path / "b")
    write_dataset(generate_split(GeneratorConfig(seed=2), 4, "c"), tmp_path / "c")
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b") != dataset_checksum(tmp_path / "c")


def test_bad_schema(tmp_path):
    write_dataset(generate_split(CFG, 1, "x"), tmp_path)
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(manifest.read_text().replace('"schema": 1', '"schema": 99'))
    with pytest.raises(DataIOError):
        read_dataset(tmp_path)
    with pytest.raises(DataIOError):
        read_dataset(tmp_path / "missing")
