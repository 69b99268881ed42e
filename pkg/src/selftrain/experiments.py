"""Experiment configs, the end-to-end pipeline, ablations and the cross-domain study.

Every run produces a *metrics document*: a JSON-serialisable dict holding the
config digest, a record per trained model (IoU report, the confusion matrix
it was computed from, per-epoch history, schedule table, compute proxy),
comparison rows and their per-setting medians. Wall-clock measurements live
only under ``timings`` and history ``seconds`` fields, so
:func:`strip_timings` yields the part that must be reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datasets import SegDataset
from .metrics import iou_report
from .model import SegModel, build_model
from .sampler import NO_AUG, AugParams, MixRatio, plan_duplicated
from .schedules import TOY_SIZES, compute_cost_proxy, schedule_table
from .synthgen import (
    DomainConfig,
    SceneConfig,
    class_presence,
    default_domain_config,
    default_scene_config,
    generate_split,
    select_k_shot_ids,
    shift_domain,
    with_imbalance,
)
from .trainer import (
    ConfidenceFilter,
    SamplePool,
    SelfTrainConfig,
    TrainConfig,
    _seed,
    evaluate,
    finetune,
    make_config,
    make_pseudo_labels,
    pretrain_then_finetune,
    real_index_for,
    run_self_training,
    train,
    train_student,
    train_teacher,
)

log = logging.getLogger(__name__)

ARMS = ("ratio", "dup", "schedule", "hard_soft", "joint_vs_pretrain", "loops")
SCHEDULE_KINDS = ("coarse2fine", "fine2coarse", "coarse2fine_plus", "fine2coarse_plus")
ENV_WORKERS = "SELFTRAIN_WORKERS"
ENV_OUT = "SELFTRAIN_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    """Serializable subset of :class:`TrainConfig` used in experiment files."""

    epochs: int = 36
    base_lr: float = 0.02
    kind: str = "constant"
    warmup_epochs: int = 0
    sizes: tuple[int, ...] = TOY_SIZES
    loss: str = "ohem"
    label_mode: str = "hard"
    base_batch: int = 16
    max_batch: int = 64
    augment: bool = True
    pseudo_weight: float = 1.0
    val_every: int = 0

    def build(self, seed: int, workers: int = 1, **overrides) -> TrainConfig:
        spec = replace(self, **overrides)
        return make_config(spec.epochs, spec.base_lr, spec.sizes, spec.kind, spec.warmup_epochs,
                           base_batch=spec.base_batch, max_batch=spec.max_batch, loss=spec.loss,
                           label_mode=spec.label_mode, aug=AugParams() if spec.augment else NO_AUG,
                           pseudo_weight=spec.pseudo_weight, val_every=spec.val_every, seed=seed,
                           workers=workers)


@dataclass(frozen=True)
class CrossDomainSpec:
    subsets: tuple[str, ...] = ("10-shot", "1/10", "1/5", "1/2", "full")
    n_target_pool: int = 300
    n_target_unlabeled: int = 1000
    n_target_val: int = 200
    finetune_samples: int = 200
    # Loss used by every model of the study (teacher, self-training base and
    # both finetuned arms); None keeps each TrainSpec's own loss.
    loss: str | None = "cross_entropy"


def _from_dict(cls, doc):
    if doc is None:
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment document; see README for the JSON schema."""

    id: str = "toy"
    scene: dict | None = None
    imbalance: float | None = None
    domain: dict | None = None
    n_labeled: int = 100
    n_unlabeled: int = 1000
    n_val: int = 200
    teacher_arch: str = "tiny"
    student_arch: str = "tiny"
    teacher: TrainSpec = field(default_factory=TrainSpec)
    student: TrainSpec = field(default_factory=TrainSpec)
    finetune: TrainSpec = field(default_factory=lambda: TrainSpec(epochs=24, base_lr=0.002))
    ratio: str = "7:1"
    n_real_student: int | None = None
    centroid_sampling: bool = True
    min_area_pseudo: int = 8
    confidence_threshold: float | None = None
    real_subset: str = "resample"
    loops: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    cross_domain: CrossDomainSpec = field(default_factory=CrossDomainSpec)

    def __post_init__(self):
        try:
            MixRatio.parse(self.ratio)
            self.source_scene()
            self.target_scene()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if min(self.n_labeled, self.n_val) < 1 or self.n_unlabeled < 0:
            raise ConfigError("dataset sizes must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.loops < 0:
            raise ConfigError("loops must be >= 0")
        if self.cross_domain.loss not in (None, "cross_entropy", "ohem"):
            raise ConfigError(f"unknown cross-domain loss {self.cross_domain.loss!r}")

    @property
    def mix_ratio(self) -> MixRatio:
        return MixRatio.parse(self.ratio)

    def source_scene(self) -> SceneConfig:
        scene = SceneConfig.from_dict(self.scene) if self.scene else default_scene_config()
        return with_imbalance(scene, self.imbalance) if self.imbalance else scene

    def domain_config(self) -> DomainConfig:
        return DomainConfig.from_dict(self.domain) if self.domain else default_domain_config()

    def target_scene(self) -> SceneConfig:
        return shift_domain(self.source_scene(), self.domain_config())

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(doc)
        for name in ("teacher", "student", "finetune"):
            if name in kw:
                kw[name] = _from_dict(TrainSpec, kw[name])
        if "cross_domain" in kw:
            kw["cross_domain"] = _from_dict(CrossDomainSpec, kw["cross_domain"])
        if "seeds" in kw:
            kw["seeds"] = tuple(kw["seeds"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def self_train_config(self, seed: int, **overrides) -> SelfTrainConfig:
        student_spec = overrides.pop("student_spec", self.student)
        kw = dict(
            teacher=self.teacher.build(seed, self.workers),
            student=student_spec.build(seed, self.workers),
            teacher_arch=self.teacher_arch,
            student_arch=self.student_arch,
            ratio=self.mix_ratio,
            n_real_student=self.n_real_student,
            centroid_sampling=self.centroid_sampling,
            min_area_pseudo=self.min_area_pseudo,
            confidence=ConfidenceFilter(self.confidence_threshold or 0.0, self.confidence_threshold is not None),
            real_subset=self.real_subset,
            seed=seed,
        )
        kw.update(overrides)
        return SelfTrainConfig(**kw)


def load_config(path) -> ExperimentConfig:
    """Read a JSON experiment config; ``SELFTRAIN_WORKERS`` may override ``workers``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = ExperimentConfig.from_dict(doc)
    return apply_env(cfg)


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    workers = os.environ.get(ENV_WORKERS)
    return replace(cfg, workers=int(workers)) if workers else cfg


# ---------------------------------------------------------------------------
# data


@dataclass
class Splits:
    labeled: SegDataset
    unlabeled: SegDataset
    val: SegDataset


def source_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    scene = cfg.source_scene()
    return Splits(generate_split(cfg.n_labeled, scene, _seed(seed, 10), "labeled"),
                  generate_split(cfg.n_unlabeled, scene, _seed(seed, 11), "unlabeled"),
                  generate_split(cfg.n_val, scene, _seed(seed, 12), "val"))


def target_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    scene, cd = cfg.target_scene(), cfg.cross_domain
    return Splits(generate_split(cd.n_target_pool, scene, _seed(seed, 20), "target_pool"),
                  generate_split(cd.n_target_unlabeled, scene, _seed(seed, 21), "target_unlabeled"),
                  generate_split(cd.n_target_val, scene, _seed(seed, 22), "target_val"))


# ---------------------------------------------------------------------------
# metrics documents


def new_document(cfg: ExperimentConfig, kind: str) -> dict:
    return {
        "experiment_id": f"{cfg.id}/{kind}",
        "kind": kind,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "models": {},
        "rows": [],
        "summary": [],
        "timings": {},
    }


def record_model(doc: dict, name: str, model: SegModel, history: list[dict], val: SegDataset,
                 config: TrainConfig | None = None, seconds: float | None = None) -> dict:
    """Evaluate ``model`` on ``val`` and store the report with its confusion matrix."""
    report, cm = evaluate(model, val)
    entry = {
        "tag": model.tag,
        "arch": model.arch_preset,
        "num_classes": model.num_classes,
        "report": report.to_dict(),
        "confusion": cm.to_list(),
        "history": [{k: v for k, v in r.items() if k != "seconds"} for r in history],
    }
    if config is not None:
        entry["schedule"] = [asdict(r) for r in schedule_table(config.crop_schedule, config.lr_policy,
                                                               config.batch_rule)]
        entry["compute_proxy"] = asdict(compute_cost_proxy(config.crop_schedule))
    doc["models"][name] = entry
    doc["timings"][name] = {
        "train_seconds": seconds if seconds is not None else sum(r.get("seconds", 0.0) for r in history),
        "epoch_seconds": [r.get("seconds") for r in history],
    }
    return entry


def model_miou(doc: dict, name: str) -> float:
    return doc["models"][name]["report"]["miou"]


def recompute_miou(entry: dict) -> float:
    """mIoU rebuilt from the stored confusion matrix (traceability check)."""
    from .metrics import ConfusionMatrix
    counts = entry["confusion"]
    return iou_report(ConfusionMatrix(len(counts), counts)).miou


def add_row(doc: dict, setting: str, seed: int, model_name: str, **extra) -> dict:
    entry = doc["models"][model_name]
    row = {"setting": setting, "seed": seed, "model": model_name, "miou": entry["report"]["miou"],
           "per_class": entry["report"]["per_class"], **extra}
    doc["rows"].append(row)
    return row


def summarize(doc: dict, key: str = "miou") -> list[dict]:
    """Median of ``key`` per setting across seeds, in first-seen setting order."""
    groups: dict[str, list] = {}
    for row in doc["rows"]:
        if row.get(key) is not None:
            groups.setdefault(row["setting"], []).append(row[key])
    doc["summary"] = [{"setting": s, "median_" + key: statistics.median(v), "n": len(v)} for s, v in groups.items()]
    return doc["summary"]


def strip_timings(doc):
    """Copy of a document without wall-clock fields."""
    if isinstance(doc, dict):
        return {k: strip_timings(v) for k, v in doc.items() if k not in ("timings", "seconds")}
    if isinstance(doc, list):
        return [strip_timings(v) for v in doc]
    return doc


def save_document(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(cfg: ExperimentConfig, seeds=None, splits_cache: dict | None = None) -> dict:
    """Teacher plus ``cfg.loops`` students per seed, evaluated on the source validation split."""
    doc = new_document(cfg, "pipeline")
    for seed in seeds or cfg.seeds:
        splits = _splits(cfg, seed, splits_cache)
        st = cfg.self_train_config(seed)
        result, seconds = _timed(run_self_training, st, splits.labeled, splits.unlabeled, None, cfg.loops)
        for i, (model, hist) in enumerate(zip(result.models, result.histories)):
            name = f"seed{seed}/{'teacher' if i == 0 else f'student{i}'}"
            record_model(doc, name, model, hist, splits.val, st.teacher if i == 0 else st.student)
            add_row(doc, "teacher" if i == 0 else f"student{i}", seed, name)
        doc["timings"][f"seed{seed}/total"] = {"train_seconds": seconds}
    summarize(doc)
    return doc


def _splits(cfg, seed, cache):
    if cache is None:
        return source_splits(cfg, seed)
    if seed not in cache:
        cache[seed] = source_splits(cfg, seed)
    return cache[seed]


@dataclass
class TeacherRun:
    model: SegModel
    history: list[dict]
    seconds: float
    pseudo: object


def teacher_for(cfg: ExperimentConfig, seed: int, splits: Splits, label_mode: str = "hard") -> TeacherRun:
    st = cfg.self_train_config(seed)
    (model, hist), seconds = _timed(train_teacher, st, splits.labeled)
    pseudo_cfg = cfg.self_train_config(seed, student_spec=replace(cfg.student, label_mode=label_mode))
    return TeacherRun(model, hist, seconds, make_pseudo_labels(model, splits.unlabeled, pseudo_cfg))


def train_and_record_student(cfg, seed, splits, teacher, name, doc, setting, student_spec=None, **overrides):
    spec = student_spec or cfg.student
    st = cfg.self_train_config(seed, student_spec=spec, **overrides)
    pseudo = teacher.pseudo
    if spec.label_mode != pseudo.mode:
        pseudo = make_pseudo_labels(teacher.model, splits.unlabeled, st)
    (model, hist), seconds = _timed(train_student, st, splits.labeled, pseudo, splits.unlabeled)
    record_model(doc, name, model, hist, splits.val, st.student, seconds)
    return add_row(doc, setting, seed, name)


def record_teacher(cfg, doc, seed, splits, teacher):
    name = f"seed{seed}/teacher"
    record_model(doc, name, teacher.model, teacher.history, splits.val, cfg.teacher.build(seed), teacher.seconds)
    add_row(doc, "teacher", seed, name)


def run_ablation(cfg: ExperimentConfig, arm: str, seeds=None, splits_cache: dict | None = None,
                 teachers: dict | None = None) -> dict:
    """Run one ablation arm over the configured seeds and summarize by setting."""
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; choose from {ARMS}")
    doc = new_document(cfg, f"ablate-{arm}")
    doc["arm"] = arm
    for seed in seeds or cfg.seeds:
        splits = _splits(cfg, seed, splits_cache)
        if arm == "loops":
            _ablate_loops(cfg, doc, seed, splits)
            continue
        teacher = (teachers or {}).get(seed) or teacher_for(cfg, seed, splits)
        if teachers is not None:
            teachers[seed] = teacher
        record_teacher(cfg, doc, seed, splits, teacher)
        _ARM_RUNNERS[arm](cfg, doc, seed, splits, teacher)
    summarize(doc)
    return doc


def _ablate_ratio(cfg, doc, seed, splits, teacher):
    for ratio in ("0:1", "1:1", "3:1", "5:1", "7:1"):
        for cs in (True, False):
            setting = f"{ratio} {'w CS' if cs else 'w/o CS'}"
            train_and_record_student(cfg, seed, splits, teacher, f"seed{seed}/{setting}", doc, setting,
                     ratio=MixRatio.parse(ratio), centroid_sampling=cs)


def _ablate_dup(cfg, doc, seed, splits, teacher):
    st = cfg.self_train_config(seed)
    n_real = st.n_real_student or max(1, len(splits.labeled) // 2)
    index = real_index_for(splits.labeled)
    for k in (1, 2, 3, 4):
        def plans(epoch, crop, k=k):
            return plan_duplicated(index, n_real, k, crop, _seed(seed, 400 + k, epoch), st.centroid_sampling)
        model = build_model(cfg.student_arch, splits.labeled.num_classes, _seed(seed, 401), tag=f"dup{k}")
        (model, hist), seconds = _timed(train, model, plans, st.student, SamplePool(splits.labeled))
        name = f"seed{seed}/dup x{k}"
        record_model(doc, name, model, hist, splits.val, st.student, seconds)
        add_row(doc, f"duplicate x{k}", seed, name, samples=n_real * k)
        if k > 1:
            setting = f"pseudo {k - 1}:1"
            train_and_record_student(cfg, seed, splits, teacher, f"seed{seed}/{setting}", doc, setting,
                     ratio=MixRatio(k - 1, 1))


def schedule_settings(cfg: ExperimentConfig) -> list[tuple[str, TrainSpec]]:
    warm = max(1, round(cfg.student.epochs * 20 / 180))
    out = [("constant", replace(cfg.student, kind="constant", warmup_epochs=0))]
    for kind in SCHEDULE_KINDS:
        out.append((kind, replace(cfg.student, kind=kind, warmup_epochs=0)))
        out.append((f"{kind} +warmup", replace(cfg.student, kind=kind, warmup_epochs=warm)))
    return out


def _ablate_schedule(cfg, doc, seed, splits, teacher):
    for setting, spec in schedule_settings(cfg):
        row = train_and_record_student(cfg, seed, splits, teacher, f"seed{seed}/{setting}", doc, setting,
                                       student_spec=spec)
        row["compute_proxy"] = doc["models"][row["model"]]["compute_proxy"]["speedup"]


def _ablate_hard_soft(cfg, doc, seed, splits, teacher):
    for mode in ("hard", "soft"):
        train_and_record_student(cfg, seed, splits, teacher, f"seed{seed}/{mode}", doc, mode,
                 student_spec=replace(cfg.student, label_mode=mode))


def _ablate_joint_vs_pretrain(cfg, doc, seed, splits, teacher):
    train_and_record_student(cfg, seed, splits, teacher, f"seed{seed}/joint", doc, "joint")
    st = cfg.self_train_config(seed)
    ft = replace(cfg.student, base_lr=cfg.finetune.base_lr).build(seed, cfg.workers)
    (model, hist), seconds = _timed(pretrain_then_finetune, st, splits.labeled, teacher.pseudo,
                                    splits.unlabeled, ft)
    name = f"seed{seed}/pretrain+finetune"
    record_model(doc, name, model, hist, splits.val, ft, seconds)
    add_row(doc, "pretrain+finetune", seed, name)


def _ablate_loops(cfg, doc, seed, splits):
    sub = run_pipeline(cfg, [seed], {seed: splits})
    doc["models"].update(sub["models"])
    doc["rows"].extend(sub["rows"])
    doc["timings"].update(sub["timings"])


_ARM_RUNNERS = {
    "ratio": _ablate_ratio,
    "dup": _ablate_dup,
    "schedule": _ablate_schedule,
    "hard_soft": _ablate_hard_soft,
    "joint_vs_pretrain": _ablate_joint_vs_pretrain,
}


# ---------------------------------------------------------------------------
# cross-domain


def subset_ids(setting: str, pool: SegDataset, seed: int) -> list[str]:
    """Ids for ``"<k>-shot"``, a fraction ``"a/b"`` or ``"full"`` of the target pool."""
    if setting == "full":
        return pool.ids
    if setting.endswith("-shot"):
        k = int(setting[:-5])
        return select_k_shot_ids(class_presence(pool), pool.num_classes, k, seed)
    try:
        num, den = (int(v) for v in setting.split("/"))
    except ValueError:
        raise ConfigError(f"unknown subset size {setting!r}") from None
    n = max(1, round(len(pool) * num / den))
    order = np.random.default_rng(seed).permutation(len(pool))
    return sorted(pool.ids[i] for i in order[:n])


def _with_loss(cfg: ExperimentConfig, loss: str | None) -> ExperimentConfig:
    if loss is None:
        return cfg
    return replace(cfg, teacher=replace(cfg.teacher, loss=loss), student=replace(cfg.student, loss=loss),
                   finetune=replace(cfg.finetune, loss=loss))


def run_cross_domain(cfg: ExperimentConfig, subsets=None, seeds=None, splits_cache: dict | None = None,
                     teachers: dict | None = None) -> dict:
    """Finetune-only versus self-training arms on a shifted target domain with new classes.

    Finetune-only starts from the source teacher. The self-training arm
    starts from a student trained on source real labels plus teacher pseudo
    labels on unlabeled *target* images. Both are then finetuned on the same
    labelled target subset and evaluated on the same target validation split.
    """
    doc = new_document(cfg, "cross-domain")
    subsets = tuple(subsets or cfg.cross_domain.subsets)
    run_cfg = _with_loss(cfg, cfg.cross_domain.loss)
    if run_cfg.teacher != cfg.teacher:
        teachers = None
    for seed in seeds or cfg.seeds:
        src = _splits(cfg, seed, splits_cache)
        tgt = target_splits(cfg, seed)
        teacher = (teachers or {}).get(seed) or teacher_for(run_cfg, seed, src)
        if teachers is not None:
            teachers[seed] = teacher
        st = run_cfg.self_train_config(seed)
        pseudo = make_pseudo_labels(teacher.model, tgt.unlabeled, st)
        (student, _), st_seconds = _timed(train_student, st, src.labeled, pseudo, tgt.unlabeled)
        doc["timings"][f"seed{seed}/self-train base"] = {"train_seconds": st_seconds}
        ft_config = run_cfg.finetune.build(seed, cfg.workers)
        for setting in subsets:
            ids = subset_ids(setting, tgt.labeled, _seed(seed, 30))
            subset = tgt.labeled.subset(ids)
            mious = {}
            for arm, init in (("finetune", teacher.model), ("self-training", student)):
                (model, hist), seconds = _timed(finetune, init, subset, ft_config,
                                                n_per_epoch=cfg.cross_domain.finetune_samples,
                                                seed=_seed(seed, 31))
                name = f"seed{seed}/{setting}/{arm}"
                record_model(doc, name, model, hist, tgt.val, ft_config, seconds)
                mious[arm] = add_row(doc, f"{setting} {arm}", seed, name, subset=setting, arm=arm,
                                     n_images=len(ids))["miou"]
            doc.setdefault("gaps", []).append({"subset": setting, "seed": seed, "n_images": len(ids),
                                               "gap": mious["self-training"] - mious["finetune"]})
    summarize(doc)
    doc["gap_summary"] = [
        {"subset": s, "median_gap": statistics.median(g["gap"] for g in doc["gaps"] if g["subset"] == s)}
        for s in subsets
    ]
    return doc
