import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_mask
from selftrain.maskops import Centroid, CentroidIndex, build_centroid_index
from selftrain.sampler import (
    NO_AUG,
    AugParams,
    MixRatio,
    augment,
    crop_at,
    load_plan,
    plan_duplicated,
    plan_epoch,
    plan_from_index,
    save_plan,
)


def make_index(num_classes, per_class, provenance="pseudo", skew=False):
    classes = {}
    for c in range(num_classes):
        count = per_class * (c + 1) ** 2 if skew else per_class
        classes[c] = tuple(Centroid(f"{provenance}{c}_{i:04d}", c, 1.0, 1.0, 4) for i in range(count))
    return CentroidIndex(classes, provenance, num_classes * per_class)


REAL = make_index(3, 5, "real")


def test_paper_composition():
    plan = plan_epoch(REAL, make_index(6, 10), 1500, MixRatio(7, 1), 32, seed=0)
    assert plan.counts == (1500, 10500) and len(plan) == 12000
    assert sum(s.provenance == "pseudo" for s in plan.specs) == 10500


def test_zero_ratio_is_teacher_baseline():
    plan = plan_epoch(REAL, None, 1500, MixRatio(0, 1), 32, seed=0)
    assert plan.counts == (1500, 0)


def test_ratio_errors():
    with pytest.raises(ValueError, match="non-integral"):
        plan_epoch(REAL, make_index(2, 2), 3, MixRatio(1, 2), 8, seed=0)
    with pytest.raises(ValueError, match="empty"):
        plan_epoch(REAL, CentroidIndex({}, "pseudo", 0), 3, MixRatio(7, 1), 8, seed=0)
    with pytest.raises(ValueError):
        MixRatio(-1, 1)
    with pytest.raises(ValueError):
        MixRatio.parse("seven")
    assert MixRatio.parse("7:1") == MixRatio(7, 1)


def test_class_uniform_draws_within_three_sigma():
    # skewed class sizes: uniformity must come from the class draw, not from centroid counts
    index = make_index(6, 3, skew=True)
    sigma = math.sqrt(6000 * (1 / 6) * (5 / 6))
    plan = plan_from_index(index, 6000, 16, seed=3)
    counts = Counter(int(s.sample_id[6]) for s in plan.specs)
    assert all(abs(counts[c] - 1000) <= 3 * sigma for c in range(6))


def test_every_class_appears_with_enough_draws():
    index = make_index(8, 2, skew=True)
    for seed in range(50):
        plan = plan_from_index(index, 400, 16, seed=seed)
        assert {int(s.sample_id[6]) for s in plan.specs} == set(range(8))


def test_plan_deterministic_and_round_trips(tmp_path):
    pseudo = make_index(4, 3)
    a = plan_epoch(REAL, pseudo, 20, MixRatio(3, 1), 16, seed=9)
    b = plan_epoch(REAL, pseudo, 20, MixRatio(3, 1), 16, seed=9)
    assert a == b
    assert a != plan_epoch(REAL, pseudo, 20, MixRatio(3, 1), 16, seed=10)
    save_plan(a, tmp_path / "plan.jsonl")
    assert load_plan(tmp_path / "plan.jsonl") == a


def test_duplicated_plan():
    plan = plan_duplicated(REAL, 3000, 2, 16, seed=1)
    assert plan.counts == (6000, 0)
    assert len(set(plan.specs)) == 6000
    assert len({s.aug_seed for s in plan.specs}) == 6000
    ids = Counter((s.sample_id, s.anchor) for s in plan.specs)
    assert all(v % 2 == 0 for v in ids.values())


def test_duplicated_k1_matches_zero_ratio():
    assert plan_duplicated(REAL, 50, 1, 16, seed=4) == plan_epoch(REAL, None, 50, MixRatio(0, 1), 16, seed=4)
    with pytest.raises(ValueError):
        plan_duplicated(REAL, 50, 0, 16, seed=4)


def test_random_crop_mode_has_no_anchor():
    plan = plan_epoch(REAL, make_index(2, 2), 10, MixRatio(1, 1), 16, seed=0, centroid_sampling=False)
    assert all(s.anchor is None for s in plan.specs)


def window_of(image_size, anchor, crop):
    image = np.zeros((image_size, image_size, 1), np.uint8)
    mask = (np.arange(image_size)[:, None] * image_size + np.arange(image_size)[None, :]).astype(np.int64)
    _, out = crop_at(image, mask, anchor, crop)
    return divmod(int(out[0, 0]), image_size)


def test_crop_examples():
    assert window_of(256, (0, 0), 64) == (0, 0)
    assert window_of(256, (128, 128), 64) == (96, 96)
    assert window_of(256, (255, 255), 64) == (192, 192)


def test_crop_pads_small_image():
    image = np.full((32, 32, 3), 7, np.uint8)
    mask = np.ones((32, 32), np.uint8)
    img, out = crop_at(image, mask, (5, 5), 64)
    assert out.shape == (64, 64) and img.shape == (64, 64, 3)
    assert int((out == 255).sum()) == 64 * 64 - 32 * 32
    assert int((img == 0).all(axis=2).sum()) == 64 * 64 - 32 * 32


def test_crop_anchor_outside():
    with pytest.raises(ValueError, match="outside"):
        crop_at(np.zeros((8, 8, 3)), np.zeros((8, 8), np.uint8), (8, 0), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 40), st.integers(4, 40), st.integers(1, 48), st.integers(0, 2**16))
def test_crop_contains_anchor_and_preserves_ids(h, w, crop, seed):
    rng = np.random.default_rng(seed)
    mask = random_mask(rng, h, w, 4)
    ids = (np.arange(h)[:, None] * w + np.arange(w)[None, :])
    anchor = (float(rng.uniform(0, h - 1e-6)), float(rng.uniform(0, w - 1e-6)))
    _, id_crop = crop_at(np.zeros((h, w, 1)), ids, anchor, crop)
    _, mask_crop = crop_at(np.zeros((h, w, 1)), mask, anchor, crop)
    assert mask_crop.shape == (crop, crop)
    if crop <= min(h, w):
        assert int(anchor[0]) * w + int(anchor[1]) in id_crop
    real = mask_crop[mask_crop != 255]
    assert set(real.tolist()) <= set(mask.ravel().tolist())


def pair(rng, size=24):
    image = rng.random((size, size, 3)).astype(np.float32)
    return image, random_mask(rng, size, size, 5)


def test_augment_deterministic(rng):
    image, mask = pair(rng)
    a = augment(image, mask, AugParams(), seed=5)
    b = augment(image, mask, AugParams(), seed=5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_augment_identity_without_randomness(rng):
    image, mask = pair(rng)
    img, out = augment(image, mask, NO_AUG, seed=1)
    assert np.array_equal(out, mask) and np.allclose(img, image)


def test_hflip_mirrors_columns(rng):
    image, mask = pair(rng)
    params = AugParams(scale_range=(1.0, 1.0), hflip_prob=1.0, blur=False, color_jitter=0.0)
    img, out = augment(image, mask, params, seed=0)
    assert np.array_equal(out, mask[:, ::-1])
    assert np.array_equal(img, image[:, ::-1])
    assert Counter(out.ravel().tolist()) == Counter(mask.ravel().tolist())


def test_upscale_keeps_class_subset(rng):
    params = AugParams(scale_range=(2.0, 2.0))
    for seed in range(50):
        image, mask = pair(rng)
        _, out = augment(image, mask, params, seed=seed)
        assert set(out[out != 255].tolist()) <= set(mask[mask != 255].tolist())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16))
def test_geometry_lock_step(seed):
    # the mask carries each pixel's source position and the image carries the
    # same position as a linear ramp, so both must follow one spatial map
    h = w = 20
    rows, cols = np.mgrid[0:h, 0:w]
    mask = (rows * w + cols + 256).astype(np.int64)
    image = np.stack([rows / h, cols / w, np.zeros((h, w))], axis=-1).astype(np.float32)
    img, out = augment(image, mask, AugParams(blur=False, color_jitter=0.0), seed=seed)
    assert img.shape == image.shape and out.shape == mask.shape
    keep = out != 255
    src_r, src_c = np.divmod(out[keep] - 256, w)
    assert np.abs(img[..., 0][keep] * h - src_r).max() <= 0.5 + 1e-4
    assert np.abs(img[..., 1][keep] * w - src_c).max() <= 0.5 + 1e-4


def test_aug_params_validation():
    with pytest.raises(ValueError):
        AugParams(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugParams(hflip_prob=1.5)


def test_index_from_masks_plans_cover_real_samples(rng):
    data = [(f"{i}", random_mask(rng, 16, 16, 3)) for i in range(6)]
    index = build_centroid_index(data, provenance="real")
    plan = plan_epoch(index, None, 60, MixRatio(0, 1), 8, seed=2)
    assert {s.sample_id for s in plan.specs} <= {sid for sid, _ in data}
    for spec in plan.specs:
        r, c = spec.anchor
        assert 0 <= r < 16 and 0 <= c < 16
