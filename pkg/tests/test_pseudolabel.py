import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain.model import build_model
from selftrain.pseudolabel import (
    SOFT_SCALE,
    ConfidenceFilter,
    PseudoLabelSet,
    apply_confidence_filter,
    dequantize,
    generate,
    load_pseudo_labels,
    quantize,
    save_pseudo_labels,
)


def constant_model(scores):
    model = build_model("tiny", len(scores), seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.head.bias.copy_(torch.tensor(scores))
    return model


def images(n=3, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [(f"{i:02d}", rng.integers(0, 256, (size, size, 3), dtype=np.uint8)) for i in range(n)]


def test_argmax_example():
    labels = generate(constant_model([2.0, 0.1, -1.0]), images(1))
    assert (labels.masks["00"] == 0).all()


def test_ties_break_to_lowest_id():
    labels = generate(constant_model([0.0, 1.0, 1.0]), images(1), mode="soft")
    assert (labels.masks["00"] == 1).all()
    assert (labels.distribution("00").argmax(axis=-1) == 1).all()


def test_soft_sums_to_one_and_matches_hard():
    teacher = build_model("tiny", 5, seed=3)
    hard = generate(teacher, images(4, 16))
    soft = generate(teacher, images(4, 16), mode="soft")
    for sid in hard.ids:
        dist = soft.distribution(sid)
        assert np.abs(dist.sum(axis=-1) - 1).max() <= 1e-6
        assert np.array_equal(dist.argmax(axis=-1), hard.masks[sid])
        assert np.array_equal(soft.masks[sid], hard.masks[sid])
    assert hard.soft is None and hard.teacher_tag == teacher.tag


def test_generate_channel_mismatch():
    teacher = build_model("tiny", 3, seed=0)
    with pytest.raises(ValueError, match="channel"):
        generate(teacher, [("a", np.zeros((8, 8, 4), np.uint8))])


def test_generate_deterministic():
    teacher = build_model("tiny", 4, seed=1)
    a = generate(teacher, images(2, 8))
    b = generate(teacher, images(2, 8))
    assert all(np.array_equal(a.masks[k], b.masks[k]) for k in a.ids)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**16), st.floats(0.01, 30))
def test_quantize_sum_and_argmax(c, seed, temperature):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, c)) * temperature
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    q = quantize(p)
    assert (q.astype(np.int64).sum(axis=1) == SOFT_SCALE).all()
    assert np.array_equal(q.argmax(axis=1), p.argmax(axis=1))
    assert np.abs(dequantize(q) - p).max() <= 2.0 / SOFT_SCALE + 1e-7


def test_quantize_near_tie_keeps_argmax():
    p = np.array([[0.5 - 1e-9, 0.5 + 1e-9]])
    assert quantize(p).argmax() == 1


def masked_set(conf):
    masks = {"a": np.zeros(conf.shape, np.uint8)}
    return PseudoLabelSet(masks, confidence={"a": conf})


def test_confidence_filter_examples():
    conf = np.array([[0.6, 0.95], [1.0, 0.3]], np.float32)
    labels = masked_set(conf)
    assert apply_confidence_filter(labels, ConfidenceFilter(0.0, True)).masks["a"].tolist() == [[0, 0], [0, 0]]
    assert apply_confidence_filter(labels, ConfidenceFilter(0.9, True)).masks["a"].tolist() == [[255, 0], [0, 255]]
    assert apply_confidence_filter(labels, ConfidenceFilter(1.0, True)).masks["a"].tolist() == [[255, 255], [0, 255]]
    assert apply_confidence_filter(labels, ConfidenceFilter(0.9, False)) is labels


def test_confidence_filter_errors():
    with pytest.raises(ValueError, match="probability"):
        apply_confidence_filter(PseudoLabelSet({"a": np.zeros((2, 2), np.uint8)}), ConfidenceFilter(0.5, True))
    with pytest.raises(ValueError):
        ConfidenceFilter(1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.floats(0, 1), st.floats(0, 1))
def test_filter_idempotent_and_monotone(seed, t1, t2):
    conf = np.random.default_rng(seed).random((6, 6)).astype(np.float32)
    labels = masked_set(conf)
    once = apply_confidence_filter(labels, ConfidenceFilter(t1, True))
    twice = apply_confidence_filter(once, ConfidenceFilter(t1, True))
    assert np.array_equal(once.masks["a"], twice.masks["a"])
    lo, hi = sorted((t1, t2))
    ign_lo = apply_confidence_filter(labels, ConfidenceFilter(lo, True)).masks["a"] == 255
    ign_hi = apply_confidence_filter(labels, ConfidenceFilter(hi, True)).masks["a"] == 255
    assert (ign_hi | ~ign_lo).all()


def test_save_load_round_trip(tmp_path):
    labels = generate(build_model("tiny", 4, seed=2), images(3, 8), mode="soft")
    base = save_pseudo_labels(labels, tmp_path, image_root="unlabeled")
    assert (base / "masks" / "00.png").exists()
    loaded = load_pseudo_labels(tmp_path)
    assert loaded.ids == labels.ids and loaded.mode == "soft"
    assert loaded.meta["image_root"] == "unlabeled"
    for sid in labels.ids:
        assert np.array_equal(loaded.masks[sid], labels.masks[sid])
        assert np.array_equal(loaded.soft[sid], labels.soft[sid])
