import math
import warnings
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain.datasets import SegDataset
from selftrain.maskops import build_centroid_index
from selftrain.model import (
    PRESETS,
    build_model,
    load_checkpoint,
    num_parameters,
    predict,
    save_checkpoint,
    to_tensor,
)
from selftrain.sampler import NO_AUG, MixRatio, plan_epoch
from selftrain.schedules import batch_for_crop, crop_for_epoch, lr_for_epoch
from selftrain.synthgen import default_scene_config, generate_split
from selftrain.trainer import (
    HeadResetWarning,
    OHEMConfig,
    PlanError,
    SamplePool,
    SelfTrainConfig,
    evaluate,
    finetune,
    make_config,
    make_pseudo_labels,
    mixed_plans,
    ohem_loss,
    pixel_losses,
    pretrain_then_finetune,
    real_index_for,
    run_self_training,
    self_train,
    single_source_plans,
    train,
)


@pytest.fixture(scope="module")
def data():
    cfg = default_scene_config()
    return generate_split(12, cfg, 1, "lab"), generate_split(12, cfg, 2, "unl"), generate_split(6, cfg, 3, "val")


def params_of(model):
    return [p.detach().clone() for p in model.state_dict().values()]


def test_ohem_examples():
    assert ohem_loss([4, 3, 2, 1], OHEMConfig(0.5)) == 3.5
    assert ohem_loss([4, 3, 2, 1], OHEMConfig(0.25, min_kept=3)) == 3.0
    assert ohem_loss([4, 3, 2, 1], OHEMConfig(1.0)) == 2.5
    with pytest.raises(ValueError):
        ohem_loss([], OHEMConfig())
    with pytest.raises(ValueError):
        OHEMConfig(0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=200))
def test_ohem_full_fraction_is_mean(losses):
    t = torch.tensor(losses, dtype=torch.float64)
    assert abs(ohem_loss(t, OHEMConfig(1.0)).item() - t.mean().item()) <= 1e-12


def test_ohem_full_fraction_equals_cross_entropy(rng):
    scores = torch.from_numpy(rng.normal(size=(2, 5, 6, 6)))
    target = torch.from_numpy(rng.integers(0, 5, (2, 6, 6)))
    per_pixel = pixel_losses(scores, target, None, torch.ones(2, dtype=torch.float64))
    ce = F.cross_entropy(scores, target)
    assert abs(ohem_loss(per_pixel, OHEMConfig(1.0)).item() - ce.item()) <= 1e-12


def test_pixel_losses_excludes_ignore():
    scores = torch.zeros(1, 3, 2, 2)
    hard = torch.tensor([[[0, 255], [1, 2]]])
    out = pixel_losses(scores, hard, None, torch.ones(1))
    assert out.shape == (3,) and torch.allclose(out, torch.full((3,), math.log(3)))


def test_soft_loss_matches_one_hot():
    scores = torch.randn(1, 3, 2, 2, generator=torch.Generator().manual_seed(0))
    hard = torch.tensor([[[0, 1], [2, 1]]])
    soft = F.one_hot(hard, 3).permute(0, 3, 1, 2).float()
    assert torch.allclose(pixel_losses(scores, hard, soft, torch.ones(1)),
                          pixel_losses(scores, hard, None, torch.ones(1)))


def test_gradient_check_finite_differences():
    torch.manual_seed(0)
    model = build_model("tiny", 3, seed=0).double()
    model.eval()  # fixed BN statistics keep the loss a smooth function of the weights
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = torch.randint(0, 3, (1, 4, 4), generator=torch.Generator().manual_seed(2))

    def loss_fn():
        return F.cross_entropy(model(x), y)

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(3)
    checked = 0
    eps = np.finfo(np.float64).eps ** (1 / 3)  # balances truncation and roundoff error
    while checked < 20:
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn().item()
            p[idx] = orig - eps
            down = loss_fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-8:
            continue
        assert abs(analytic - numeric) / scale < 1e-3, (analytic, numeric)
        checked += 1


def test_model_shapes_and_presets():
    sizes = {name: num_parameters(build_model(name, 6, 0)) for name in PRESETS}
    assert len(set(sizes.values())) == 3
    for name in PRESETS:
        model = build_model(name, 6, 0)
        model.eval()
        assert model(torch.zeros(1, 3, 16, 24)).shape == (1, 6, 16, 24)


def test_build_model_seeded():
    a, b = build_model("tiny", 4, 5), build_model("tiny", 4, 5)
    assert all(torch.equal(x, y) for x, y in zip(params_of(a), params_of(b)))


def test_predict_contract(rng):
    model = build_model("small", 4, 0)
    image = rng.integers(0, 256, (16, 20, 3), dtype=np.uint8)
    m1, c1 = predict(model, image)
    m2, c2 = predict(model, image)
    assert np.array_equal(m1, m2) and np.array_equal(c1, c2)
    assert m1.shape == (16, 20) and ((c1 >= 0) & (c1 <= 1)).all()
    with pytest.raises(ValueError, match="divisible"):
        predict(model, image[:15])


def test_checkpoint_round_trip(tmp_path):
    model = build_model("tiny", 5, 3, tag="teacher")
    save_checkpoint(model, tmp_path / "m.pt", {"a": 1})
    loaded, meta = load_checkpoint(tmp_path / "m.pt")
    assert meta["tag"] == "teacher" and meta["num_classes"] == 5 and len(meta["config_digest"]) == 16
    assert all(torch.equal(x, y) for x, y in zip(params_of(model), params_of(loaded)))


def test_zero_epochs_is_noop(data):
    lab, _, _ = data
    model = build_model("tiny", 6, 0)
    before = params_of(model)
    out, hist = train(model, single_source_plans(real_index_for(lab), 8, 0), make_config(0), SamplePool(lab))
    assert hist == [] and all(torch.equal(a, b) for a, b in zip(before, params_of(out)))


class RecordingPool(SamplePool):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.seen = Counter()

    def fetch(self, spec, aug):
        self.seen[(spec.sample_id, spec.provenance)] += 1
        return super().fetch(spec, aug)


def test_plan_fidelity_steps_and_schedule_obedience(data):
    lab, unl, _ = data
    model = build_model("tiny", 6, 0)
    labels = make_pseudo_labels(model, unl, SelfTrainConfig(make_config(1), make_config(1)))
    pseudo_index = build_centroid_index(((s, labels.masks[s]) for s in labels.ids), "pseudo")
    config = make_config(3, kind="coarse2fine_plus", aug=NO_AUG)
    plans = {}

    def source(epoch, crop):
        plans[epoch] = plan_epoch(real_index_for(lab), pseudo_index, 5, MixRatio(3, 1), crop, epoch)
        return plans[epoch]

    pool = RecordingPool(lab, labels, unl)
    _, hist = train(model, source, config, pool)
    expected = Counter()
    for epoch, record in enumerate(hist):
        plan = plans[epoch]
        expected.update((s.sample_id, s.provenance) for s in plan.specs)
        crop = crop_for_epoch(config.crop_schedule, epoch)
        batch = batch_for_crop(config.batch_rule, crop)
        assert (record["crop"], record["batch"], record["lr"]) == (crop, batch, lr_for_epoch(config.lr_policy, epoch))
        assert record["steps"] == math.ceil(len(plan) / batch)
        assert (record["n_real"], record["n_pseudo"]) == (5, 15)
    assert pool.seen == expected


def test_missing_sample_fails_before_training(data):
    lab, _, _ = data
    index = real_index_for(lab)
    model = build_model("tiny", 6, 0)
    before = params_of(model)
    small = lab.subset(lab.ids[:3])
    with pytest.raises(PlanError, match="missing"):
        train(model, single_source_plans(index, 40, 0), make_config(2), SamplePool(small))
    assert all(torch.equal(a, b) for a, b in zip(before, params_of(model)))


def test_loss_decreases_on_separable_toy():
    torch.manual_seed(0)
    model = build_model("tiny", 2, seed=0)
    rng = np.random.default_rng(0)
    mask = np.zeros((2, 16, 16), np.int64)
    mask[:, :, 8:] = 1
    image = np.zeros((2, 16, 16, 3), np.float32)
    image[mask == 1] = (0.9, 0.2, 0.2)
    image[mask == 0] = (0.2, 0.2, 0.9)
    image += rng.normal(0, 0.05, image.shape).astype(np.float32)
    x, y = to_tensor(image), torch.from_numpy(mask)
    opt = torch.optim.SGD(model.parameters(), lr=0.02, momentum=0.9, weight_decay=1e-4)
    losses = []
    for _ in range(50):
        loss = F.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0] * 0.5
    assert np.all(np.diff(smooth[::10]) < 0)


def test_finetune_zero_epochs_and_head_resize(data):
    lab, _, _ = data
    model = build_model("tiny", 6, 0)
    same, hist = finetune(model, lab, make_config(0))
    assert hist == [] and all(torch.equal(a, b) for a, b in zip(params_of(model), params_of(same)))
    target = SegDataset(lab.images, lab.masks, 9, "target")
    with pytest.warns(HeadResetWarning):
        tuned, hist = finetune(model, target, make_config(1, base_lr=0.002))
    assert tuned.num_classes == 9 and tuned.head.out_channels == 9 and len(hist) == 1
    assert model.num_classes == 6


def test_self_train_counts_and_mixed_archs(data):
    lab, unl, val = data
    cfg = SelfTrainConfig(make_config(1), make_config(1), teacher_arch="small", student_arch="tiny",
                          ratio=MixRatio(1, 1), n_real_student=4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        models = self_train(cfg, lab, unl, val, loops=1)
    assert len(models) == 2 and models[0].arch_preset == "small" and models[1].arch_preset == "tiny"
    result = run_self_training(cfg, lab, unl, None, loops=3)
    assert len(result.models) == 4 and len(result.pseudo_sets) == 3
    assert [m.tag for m in result.models] == ["teacher", "student1", "student2", "student3"]
    with pytest.raises(ValueError, match="unlabeled"):
        self_train(cfg, lab, SegDataset({}), loops=1)


def test_training_deterministic(data):
    lab, _, val = data
    cfg = make_config(2, kind="coarse2fine_plus")
    runs = []
    for _ in range(2):
        model = build_model("tiny", 6, 0)
        _, hist = train(model, mixed_plans(real_index_for(lab), None, 8, MixRatio(0, 1), 5), cfg, SamplePool(lab), val)
        runs.append([{k: v for k, v in r.items() if k != "seconds"} for r in hist])
    assert runs[0] == runs[1]


def test_prefetch_workers_do_not_change_result(data):
    lab, _, _ = data
    out = []
    for workers in (1, 3):
        model = build_model("tiny", 6, 0)
        cfg = make_config(1, workers=workers)
        train(model, single_source_plans(real_index_for(lab), 12, 4), cfg, SamplePool(lab))
        out.append(params_of(model))
    assert all(torch.equal(a, b) for a, b in zip(*out))


def test_pretrain_then_finetune_runs(data):
    lab, unl, val = data
    cfg = SelfTrainConfig(make_config(1), make_config(1), ratio=MixRatio(1, 1), n_real_student=4)
    teacher = build_model("tiny", 6, 0)
    pseudo = make_pseudo_labels(teacher, unl, cfg)
    model, hist = pretrain_then_finetune(cfg, lab, pseudo, unl, make_config(1, base_lr=0.002), val)
    assert len(hist) == 2 and hist[-1]["val_miou"] is not None
    report, cm = evaluate(model, val)
    assert report.pixel_count == cm.total == 6 * 64 * 64
