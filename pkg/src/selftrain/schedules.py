"""Training control laws: crop-size schedules, poly learning rate, batch scaling.

All functions here are pure. The trainer calls them once per epoch, and the
CLI renders them as an auditing table.
"""

from __future__ import annotations

from dataclasses import dataclass

KINDS = ("constant", "coarse2fine", "fine2coarse", "coarse2fine_plus", "fine2coarse_plus")
_ALIASES = {"coarse2fine+": "coarse2fine_plus", "fine2coarse+": "fine2coarse_plus"}


@dataclass(frozen=True)
class CropSchedule:
    kind: str = "constant"
    sizes: tuple[int, ...] = (400, 480, 560, 640, 720, 800)
    warmup_epochs: int = 0
    warmup_size: int = 800
    total_epochs: int = 180

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not self.sizes:
            raise ValueError("sizes must be non-empty")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"sizes must be strictly increasing, got {self.sizes}")
        if self.sizes[0] < 1 or self.warmup_size < 1:
            raise ValueError("crop sizes must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")

    @property
    def max_size(self) -> int:
        return self.sizes[-1]


@dataclass(frozen=True)
class LRPolicy:
    base_lr: float = 0.02
    power: float = 0.9
    max_epoch: int = 180

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.power <= 1:
            raise ValueError("power must lie in (0, 1]")
        if self.max_epoch < 0:
            raise ValueError("max_epoch must be non-negative")


@dataclass(frozen=True)
class BatchRule:
    base_batch: int = 16
    base_crop: int = 800
    max_batch: int = 64

    def __post_init__(self):
        if self.base_batch < 1 or self.base_crop < 1:
            raise ValueError("base_batch and base_crop must be >= 1")
        if self.max_batch < self.base_batch:
            raise ValueError("max_batch must be >= base_batch")


def crop_for_epoch(schedule: CropSchedule, epoch: int) -> int:
    """Crop size used during ``epoch``.

    Warm-up epochs use ``warmup_size``. The stepwise schedules split the
    post-warm-up epochs into ``len(sizes)`` equal phases, and any remainder
    goes to the last phase. The ``_plus`` variants cycle through the sizes
    once per epoch.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.warmup_size
    sizes, k = schedule.sizes, len(schedule.sizes)
    e = epoch - schedule.warmup_epochs
    post = schedule.total_epochs - schedule.warmup_epochs
    kind = schedule.kind
    if kind == "constant":
        return sizes[-1]
    if kind in ("coarse2fine", "fine2coarse"):
        phase = min(k - 1, e // max(1, post // k))
        return sizes[phase] if kind == "coarse2fine" else sizes[k - 1 - phase]
    if kind == "coarse2fine_plus":
        return sizes[e % k]
    return sizes[k - 1 - e % k]


def lr_for_epoch(policy: LRPolicy, epoch: int) -> float:
    """Poly decay: ``base_lr * (1 - epoch / max_epoch) ** power``."""
    if not 0 <= epoch <= policy.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {policy.max_epoch}]")
    if policy.max_epoch == 0:
        return policy.base_lr
    return policy.base_lr * (1.0 - epoch / policy.max_epoch) ** policy.power


def batch_for_crop(rule: BatchRule, crop: int) -> int:
    """Keep pixels per batch near the baseline, capped at ``max_batch``."""
    if crop < 1:
        raise ValueError("crop must be >= 1")
    scaled = (rule.base_batch * rule.base_crop * rule.base_crop) // (crop * crop)
    return min(rule.max_batch, max(1, scaled))


@dataclass(frozen=True)
class ComputeProxy:
    cost: float
    speedup: float
    pixels: int
    baseline_pixels: int


def compute_cost_proxy(schedule: CropSchedule, total_epochs: int | None = None,
                       samples_per_epoch: int = 1) -> ComputeProxy:
    """Processed-pixel cost relative to training at the largest size every epoch."""
    epochs = schedule.total_epochs if total_epochs is None else total_epochs
    if epochs != schedule.total_epochs:
        schedule = CropSchedule(schedule.kind, schedule.sizes,
                                min(schedule.warmup_epochs, epochs), schedule.warmup_size, epochs)
    pixels = sum(crop_for_epoch(schedule, e) ** 2 for e in range(epochs)) * samples_per_epoch
    baseline = epochs * schedule.max_size ** 2 * samples_per_epoch
    if baseline == 0:
        return ComputeProxy(1.0, 1.0, 0, 0)
    cost = pixels / baseline
    return ComputeProxy(cost, 1.0 / cost, pixels, baseline)


@dataclass(frozen=True)
class ScheduleRow:
    epoch: int
    crop: int
    batch: int
    lr: float


def schedule_table(schedule: CropSchedule, policy: LRPolicy, rule: BatchRule) -> list[ScheduleRow]:
    rows = []
    for epoch in range(schedule.total_epochs):
        crop = crop_for_epoch(schedule, epoch)
        rows.append(ScheduleRow(epoch, crop, batch_for_crop(rule, crop), lr_for_epoch(policy, epoch)))
    return rows


# desk-scale analog of the 400..800 ladder on 64x64 scenes (same 1:2 span)
TOY_SIZES = (20, 24, 28, 32, 36, 40)
