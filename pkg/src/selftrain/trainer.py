"""Training loops: teacher, joint student, finetuning, multi-loop self-training.

Compute backend notes: everything runs on CPU in float32. With a fixed
thread count, PyTorch CPU convolutions are deterministic, so a fixed seed
reproduces losses and metrics bit-for-bit. Changing ``torch.set_num_threads``
between runs can change reduction order and hence the low bits.
"""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from collections import Counter
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import SegDataset
from .maskops import IGNORE_INDEX, CentroidIndex, build_centroid_index
from .metrics import ConfusionMatrix, IoUReport, iou_report
from .model import SegModel, build_model, predict_proba, to_tensor
from .pseudolabel import ConfidenceFilter, PseudoLabelSet, apply_confidence_filter, generate
from .sampler import AugParams, EpochPlan, MixRatio, SampleSpec, augment, crop_at, plan_epoch, plan_from_index
from .schedules import BatchRule, CropSchedule, LRPolicy, batch_for_crop, crop_for_epoch, lr_for_epoch

log = logging.getLogger(__name__)

FINETUNE_LR = 0.002


class HeadResetWarning(UserWarning):
    pass


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class OHEMConfig:
    keep_fraction: float = 0.25
    min_kept: int = 1

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.min_kept < 1:
            raise ValueError("min_kept must be >= 1")


def ohem_loss(per_pixel_losses, config: OHEMConfig):
    """Mean of the ``max(min_kept, floor(keep_fraction * n))`` largest losses.

    Accepts a 1-D tensor (returns a scalar tensor, differentiable) or any
    sequence of numbers (returns a float).
    """
    as_tensor = isinstance(per_pixel_losses, torch.Tensor)
    losses = per_pixel_losses.reshape(-1) if as_tensor else torch.as_tensor(
        list(per_pixel_losses), dtype=torch.float64)
    n = losses.numel()
    if n == 0:
        raise ValueError("ohem_loss needs at least one pixel loss")
    k = min(n, max(config.min_kept, math.floor(config.keep_fraction * n)))
    if k == n:
        out = losses.mean()
    else:
        top = torch.sort(losses, descending=True, stable=True).values[:k]
        out = top.mean()
    return out if as_tensor else float(out)


@dataclass(frozen=True)
class TrainConfig:
    lr_policy: LRPolicy = field(default_factory=LRPolicy)
    crop_schedule: CropSchedule = field(default_factory=CropSchedule)
    batch_rule: BatchRule = field(default_factory=BatchRule)
    loss: str = "ohem"
    ohem_keep_fraction: float = 0.25
    ohem_min_kept_fraction: float = 0.1
    label_mode: str = "hard"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pseudo_weight: float = 1.0
    aug: AugParams = field(default_factory=AugParams)
    seed: int = 0
    val_every: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "ohem"):
            raise ValueError(f"loss must be 'cross_entropy' or 'ohem', got {self.loss!r}")
        if self.label_mode not in ("hard", "soft"):
            raise ValueError(f"label_mode must be 'hard' or 'soft', got {self.label_mode!r}")
        if self.crop_schedule.total_epochs != self.lr_policy.max_epoch:
            raise ValueError("crop_schedule.total_epochs must equal lr_policy.max_epoch")

    @property
    def epochs(self) -> int:
        return self.lr_policy.max_epoch

    def ohem_for_crop(self, crop: int) -> OHEMConfig:
        return OHEMConfig(self.ohem_keep_fraction, max(1, int(self.ohem_min_kept_fraction * crop * crop)))


def make_config(epochs: int, base_lr: float = 0.02, sizes=(20, 24, 28, 32, 36, 40), kind: str = "constant",
                warmup_epochs: int = 0, warmup_size: int | None = None, base_batch: int = 16,
                max_batch: int = 64, **kwargs) -> TrainConfig:
    """Convenience constructor keeping schedule, LR and batch rule consistent."""
    sizes = tuple(sizes)
    return TrainConfig(
        lr_policy=LRPolicy(base_lr, 0.9, epochs),
        crop_schedule=CropSchedule(kind, sizes, warmup_epochs, warmup_size or sizes[-1], epochs),
        batch_rule=BatchRule(base_batch, sizes[-1], max_batch),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# data access


class SamplePool:
    """Resolves plan specs to augmented training crops."""

    def __init__(self, real: SegDataset, pseudo: PseudoLabelSet | None = None,
                 pseudo_images: SegDataset | None = None, soft: bool = False):
        self.real = real
        self.pseudo = pseudo
        self.pseudo_images = pseudo_images
        self.soft = soft and pseudo is not None and pseudo.mode == "soft"
        if pseudo is not None and pseudo_images is None:
            raise ValueError("pseudo labels need their source images")

    def has(self, provenance: str, sample_id: str) -> bool:
        if provenance == "real":
            return sample_id in self.real.masks
        return self.pseudo is not None and sample_id in self.pseudo.masks and sample_id in self.pseudo_images.images

    def raw(self, provenance: str, sample_id: str):
        if provenance == "real":
            return self.real.images[sample_id], self.real.masks[sample_id], None
        soft = self.pseudo.distribution(sample_id) if self.soft else None
        return self.pseudo_images.images[sample_id], self.pseudo.masks[sample_id], soft

    def fetch(self, spec: SampleSpec, aug: AugParams):
        image, mask, soft = self.raw(spec.provenance, spec.sample_id)
        image = image.astype(np.float32) / 255.0
        rng = np.random.default_rng(spec.aug_seed)
        out = crop_at(image, mask, spec.anchor, spec.crop_size, rng=rng, soft=soft)
        return augment(*out[:2], aug, spec.aug_seed, soft=out[2] if soft is not None else None)


def _fetch_all(pool: SamplePool, specs, aug: AugParams, executor):
    if executor is None:
        return [pool.fetch(s, aug) for s in specs]
    return list(executor.map(lambda s: pool.fetch(s, aug), specs))


def pixel_losses(scores: torch.Tensor, hard: torch.Tensor, soft: torch.Tensor | None,
                 weights: torch.Tensor) -> torch.Tensor:
    """Flattened per-pixel losses over labelled pixels.

    ``hard`` holds class ids (ignore=255) and ``soft`` optional per-pixel
    distributions (``N x C x H x W``) whose rows override ``hard`` wherever
    they carry mass. ``weights`` is a per-sample multiplier.
    """
    logp = F.log_softmax(scores, dim=1)
    valid = hard != IGNORE_INDEX
    loss = F.nll_loss(logp, hard.clamp(max=scores.shape[1] - 1) * valid, reduction="none")
    if soft is not None:
        mass = soft.sum(dim=1)
        soft_valid = mass > 0
        soft_loss = -(soft * logp).sum(dim=1)
        loss = torch.where(soft_valid, soft_loss, loss)
        valid = valid | soft_valid
    loss = loss * weights.view(-1, 1, 1)
    return loss[valid]


def evaluate(model: SegModel, dataset: SegDataset, batch_size: int = 50) -> tuple[IoUReport, ConfusionMatrix]:
    """Single-scale, full-resolution mIoU over the dataset's labelled images."""
    cm = ConfusionMatrix(max(model.num_classes, dataset.num_classes))
    ids = dataset.ids
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        probs = predict_proba(model, dataset.stacked_images(chunk), batch_size=batch_size)
        for sid, p in zip(chunk, probs):
            cm.accumulate(p.argmax(axis=-1), dataset.masks[sid])
    return iou_report(cm), cm


PlanSource = Callable[[int, int], EpochPlan]


def train(model: SegModel, plan_source: PlanSource, config: TrainConfig, pool: SamplePool,
          val: SegDataset | None = None) -> tuple[SegModel, list[dict]]:
    """Run ``config.epochs`` epochs, consuming each epoch's plan exactly once.

    ``plan_source(epoch, crop_size)`` supplies the plans. All plans are
    built and checked against ``pool`` before the first step. Each history
    record carries the epoch's crop, batch, lr, step count, mean loss,
    consumed composition, validation mIoU (when scheduled) and wall time.
    """
    plans = []
    for epoch in range(config.epochs):
        crop = crop_for_epoch(config.crop_schedule, epoch)
        plan = plan_source(epoch, crop)
        missing = sorted({(s.provenance, s.sample_id) for s in plan.specs
                          if not pool.has(s.provenance, s.sample_id)})
        if missing:
            raise PlanError(f"epoch {epoch} plan references missing samples: {missing[:5]}"
                            + (" ..." if len(missing) > 5 else ""))
        plans.append((crop, plan))

    history = []
    if not plans:
        return model, history
    opt = torch.optim.SGD(model.parameters(), lr=config.lr_policy.base_lr,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch, (crop, plan) in enumerate(plans):
            start = time.perf_counter()
            lr = lr_for_epoch(config.lr_policy, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = batch_for_crop(config.batch_rule, crop)
            ohem = config.ohem_for_crop(crop)
            model.train()
            losses, consumed = [], Counter()
            for i in range(0, len(plan.specs), batch):
                specs = plan.specs[i:i + batch]
                samples = _fetch_all(pool, specs, config.aug, executor)
                consumed.update(s.provenance for s in specs)
                x = to_tensor(np.stack([s[0] for s in samples]))
                hard = torch.from_numpy(np.stack([s[1] for s in samples]).astype(np.int64))
                soft = None
                if pool.soft:
                    c = model.num_classes
                    soft = torch.from_numpy(np.stack([
                        s[2].transpose(2, 0, 1) if len(s) > 2 else np.zeros((c,) + s[1].shape, np.float32)
                        for s in samples]).astype(np.float32))
                weights = torch.tensor([config.pseudo_weight if s.provenance == "pseudo" else 1.0
                                        for s in specs])
                per_pixel = pixel_losses(model(x), hard, soft, weights)
                if per_pixel.numel() == 0:
                    continue
                loss = ohem_loss(per_pixel, ohem) if config.loss == "ohem" else per_pixel.mean()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            record = {
                "epoch": epoch, "crop": crop, "batch": batch, "lr": lr,
                "steps": math.ceil(len(plan.specs) / batch),
                "loss": float(np.mean(losses)) if losses else None,
                "n_real": consumed["real"], "n_pseudo": consumed["pseudo"],
                "val_miou": None,
            }
            last = epoch == len(plans) - 1
            if val is not None and config.val_every and ((epoch + 1) % config.val_every == 0 or last):
                record["val_miou"] = evaluate(model, val)[0].miou
            record["seconds"] = time.perf_counter() - start
            log.info("epoch %d crop %d batch %d lr %.5f loss %s val %s", epoch, crop, batch, lr,
                     record["loss"], record["val_miou"])
            history.append(record)
    finally:
        if executor is not None:
            executor.shutdown()
    return model, history


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def real_index_for(dataset: SegDataset, min_area: int = 1, connectivity: int = 4) -> CentroidIndex:
    return build_centroid_index(dataset.labeled_pairs(), "real", min_area, connectivity, dataset.num_classes or None)


def single_source_plans(index: CentroidIndex, n: int, seed: int, centroid_sampling: bool = True) -> PlanSource:
    return lambda epoch, crop: plan_from_index(index, n, crop, _seed(seed, epoch), centroid_sampling)


def mixed_plans(real_index: CentroidIndex, pseudo_index: CentroidIndex | None, n_real: int, ratio: MixRatio,
                seed: int, centroid_sampling: bool = True) -> PlanSource:
    return lambda epoch, crop: plan_epoch(real_index, pseudo_index, n_real, ratio, crop,
                                          _seed(seed, epoch), centroid_sampling)


def finetune(model: SegModel, subset: SegDataset, config: TrainConfig, n_per_epoch: int | None = None,
             val: SegDataset | None = None, centroid_sampling: bool = True,
             seed: int | None = None) -> tuple[SegModel, list[dict]]:
    """Continue training a copy of ``model`` on a (small) labelled subset.

    If the subset's label space differs from the model's head, the head is
    re-initialised for the new class count and a ``HeadResetWarning`` is
    emitted.
    """
    if len(subset) == 0:
        raise ValueError("finetuning subset is empty")
    tuned = copy.deepcopy(model)
    seed = config.seed if seed is None else seed
    if subset.num_classes and subset.num_classes != tuned.num_classes:
        msg = (f"re-initialising head of {tuned.tag!r}: {tuned.num_classes} -> "
               f"{subset.num_classes} classes")
        warnings.warn(msg, HeadResetWarning, stacklevel=2)
        log.warning(msg)
        tuned.replace_head(subset.num_classes, seed=_seed(seed, 7))
    if config.epochs == 0:
        return tuned, []
    index = real_index_for(subset)
    n = n_per_epoch or len(subset)
    return train(tuned, single_source_plans(index, n, _seed(seed, 11), centroid_sampling), config,
                 SamplePool(subset), val)


# ---------------------------------------------------------------------------
# self-training


@dataclass(frozen=True)
class SelfTrainConfig:
    teacher: TrainConfig
    student: TrainConfig
    teacher_arch: str = "tiny"
    student_arch: str = "tiny"
    ratio: MixRatio = MixRatio(7, 1)
    n_real_teacher: int | None = None
    n_real_student: int | None = None
    centroid_sampling: bool = True
    min_area_real: int = 1
    min_area_pseudo: int = 8
    connectivity: int = 4
    confidence: ConfidenceFilter = ConfidenceFilter()
    real_subset: str = "resample"
    seed: int = 0

    def __post_init__(self):
        if self.real_subset not in ("resample", "fixed"):
            raise ValueError("real_subset must be 'resample' or 'fixed'")


@dataclass
class SelfTrainResult:
    models: list[SegModel]
    histories: list[list[dict]]
    pseudo_sets: list[PseudoLabelSet] = field(default_factory=list)


def train_teacher(config: SelfTrainConfig, labeled: SegDataset, val: SegDataset | None = None,
                  num_classes: int | None = None) -> tuple[SegModel, list[dict]]:
    num_classes = num_classes or labeled.num_classes
    model = build_model(config.teacher_arch, num_classes, _seed(config.seed, 1), tag="teacher")
    index = real_index_for(labeled, config.min_area_real, config.connectivity)
    n_real = config.n_real_teacher or len(labeled)
    plans = mixed_plans(index, None, n_real, MixRatio(0, 1), _seed(config.seed, 2), config.centroid_sampling)
    return train(model, plans, config.teacher, SamplePool(labeled), val)


def make_pseudo_labels(teacher: SegModel, unlabeled: SegDataset, config: SelfTrainConfig) -> PseudoLabelSet:
    labels = generate(teacher, ((sid, unlabeled.images[sid]) for sid in unlabeled.ids),
                      mode=config.student.label_mode)
    if config.confidence.enabled and labels.mode == "hard":
        labels = apply_confidence_filter(labels, config.confidence)
    return labels


def pseudo_index_for(labels: PseudoLabelSet, config: SelfTrainConfig) -> CentroidIndex:
    return build_centroid_index(((sid, labels.masks[sid]) for sid in labels.ids), "pseudo",
                                config.min_area_pseudo, config.connectivity)


def train_student(config: SelfTrainConfig, labeled: SegDataset, pseudo: PseudoLabelSet, unlabeled: SegDataset,
                  val: SegDataset | None = None, loop: int = 1, num_classes: int | None = None,
                  init: SegModel | None = None) -> tuple[SegModel, list[dict]]:
    """Joint training on real plus pseudo labels at the configured mix ratio."""
    num_classes = num_classes or labeled.num_classes
    model = init if init is not None else build_model(
        config.student_arch, num_classes, _seed(config.seed, 100 + loop), tag=f"student{loop}")
    real_index = real_index_for(labeled, config.min_area_real, config.connectivity)
    if config.real_subset == "fixed":
        ids = real_index.sample_ids()
        keep = np.random.default_rng(_seed(config.seed, 3)).permutation(len(ids))[:max(1, len(ids) // 2)]
        real_index = real_index.restrict(ids[i] for i in sorted(keep))
    n_real = config.n_real_student or max(1, len(labeled) // 2)
    pseudo_index = pseudo_index_for(pseudo, config) if config.ratio.pseudo else None
    plans = mixed_plans(real_index, pseudo_index, n_real, config.ratio,
                        _seed(config.seed, 200 + loop), config.centroid_sampling)
    pool = SamplePool(labeled, pseudo, unlabeled, soft=config.student.label_mode == "soft")
    return train(model, plans, config.student, pool, val)


def run_self_training(config: SelfTrainConfig, labeled: SegDataset, unlabeled: SegDataset,
                      val: SegDataset | None = None, loops: int = 1) -> SelfTrainResult:
    """Teacher on real labels, then ``loops`` rounds of pseudo-label + joint student."""
    if loops < 0:
        raise ValueError("loops must be >= 0")
    if loops >= 1 and len(unlabeled) == 0:
        raise ValueError("self-training needs a non-empty unlabeled pool")
    teacher, hist = train_teacher(config, labeled, val)
    result = SelfTrainResult([teacher], [hist])
    for loop in range(1, loops + 1):
        pseudo = make_pseudo_labels(result.models[-1], unlabeled, config)
        student, hist = train_student(config, labeled, pseudo, unlabeled, val, loop)
        result.models.append(student)
        result.histories.append(hist)
        result.pseudo_sets.append(pseudo)
    return result


def self_train(config: SelfTrainConfig, labeled: SegDataset, unlabeled: SegDataset,
               val: SegDataset | None = None, loops: int = 1) -> list[SegModel]:
    return run_self_training(config, labeled, unlabeled, val, loops).models


def pretrain_then_finetune(config: SelfTrainConfig, labeled: SegDataset, pseudo: PseudoLabelSet,
                           unlabeled: SegDataset, finetune_config: TrainConfig,
                           val: SegDataset | None = None) -> tuple[SegModel, list[dict]]:
    """Pre-train on pseudo labels only, then finetune on the real labels."""
    num_classes = labeled.num_classes
    model = build_model(config.student_arch, num_classes, _seed(config.seed, 300), tag="pretrain_finetune")
    history = []
    if config.student.epochs:
        index = pseudo_index_for(pseudo, config)
        n_real = config.n_real_student or max(1, len(labeled) // 2)
        n = n_real + config.ratio.pseudo_count(n_real)
        pool = SamplePool(labeled, pseudo, unlabeled, soft=config.student.label_mode == "soft")
        model, history = train(model, single_source_plans(index, n, _seed(config.seed, 301),
                                                          config.centroid_sampling), config.student, pool)
    model, ft_history = finetune(model, labeled, finetune_config, val=val, seed=_seed(config.seed, 302),
                                 centroid_sampling=config.centroid_sampling)
    model.tag = "pretrain_finetune"
    return model, history + ft_history
