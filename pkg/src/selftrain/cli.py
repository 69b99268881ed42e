"""Command-line driver.

Workspace layout under ``--out`` (default ``$SELFTRAIN_OUT`` or ``./runs``)::

    data/{labeled,unlabeled,val}/       synthetic source splits
    data/target_{pool,unlabeled,val}/   shifted target splits (synth-gen --target)
    indexes/{real,pseudo}.json          centroid indexes
    models/{teacher,student}.pt         checkpoints
    pseudo/                             pseudo labels + manifest
    metrics/<verb>.json                 metrics documents

Exit codes: 0 success, 1 usage or config error, 2 runtime failure or missing
artifact, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import torch

from . import experiments as ex
from .datasets import MissingArtifactError, SegDataset, load_dataset, read_mask
from .maskops import build_centroid_index, save_index
from .metrics import ConfusionMatrix, iou_report
from .model import load_checkpoint, save_checkpoint
from .pseudolabel import load_pseudo_labels, save_pseudo_labels
from .report import crop_series, load_documents, plot_schedules, write_report
from .schedules import compute_cost_proxy, schedule_table
from .synthgen import generate_dataset
from .trainer import make_pseudo_labels, train_student, train_teacher

log = logging.getLogger("selftrain")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.apply_env(ex.ExperimentConfig())
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _out(args) -> Path:
    return Path(args.out or os.environ.get(ex.ENV_OUT, "runs"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run the producing command first)")
    return path


def _dataset(out: Path, name: str) -> SegDataset:
    return load_dataset(_require(out / "data" / name, f"dataset '{name}'"))


def _fragment(out: Path, name: str, doc: dict) -> Path:
    path = ex.save_document(doc, out / "metrics" / f"{name}.json")
    log.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# pipeline verbs


def cmd_synth_gen(args) -> int:
    cfg, out = _config(args), _out(args)
    seed = cfg.seeds[0]
    scene = cfg.source_scene()
    splits = [("labeled", cfg.n_labeled, 10, scene), ("unlabeled", cfg.n_unlabeled, 11, scene),
              ("val", cfg.n_val, 12, scene)]
    if args.target:
        target, cd = cfg.target_scene(), cfg.cross_domain
        splits += [("target_pool", cd.n_target_pool, 20, target),
                   ("target_unlabeled", cd.n_target_unlabeled, 21, target),
                   ("target_val", cd.n_target_val, 22, target)]
    doc = ex.new_document(cfg, "synth-gen")
    doc["datasets"] = {}
    for name, n, salt, scene_cfg in splits:
        if n < 1:
            continue
        manifest = generate_dataset(n, scene_cfg, ex._seed(seed, salt), out / "data" / name, name)
        doc["datasets"][name] = {"n": n, "config_digest": manifest["config_digest"]}
        print(f"{name}: {n} scenes -> {out / 'data' / name}")
    _fragment(out, "synth-gen", doc)
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg, out = _config(args), _out(args)
    if args.source == "real":
        ds = _dataset(out, "labeled")
        pairs, num_classes = ds.labeled_pairs(), ds.num_classes
        min_area = 1
    else:
        labels = load_pseudo_labels(_require(out / "pseudo" / "manifest.json", "pseudo labels").parent)
        pairs, num_classes = [(sid, labels.masks[sid]) for sid in labels.ids], labels.num_classes
        min_area = cfg.min_area_pseudo
    index = build_centroid_index(pairs, args.source, min_area, num_classes=num_classes or None,
                                 per_image=args.per_image, workers=cfg.workers)
    path = out / "indexes" / f"{args.source}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, path)
    print(f"{args.source} index: {len(index)} centroids over classes {index.class_ids} -> {path}")
    return EXIT_OK


def _val_if_needed(cfg, spec, out):
    return _dataset(out, "val") if spec.val_every else None


def cmd_train_teacher(args) -> int:
    cfg, out = _config(args), _out(args)
    seed = cfg.seeds[0]
    labeled = _dataset(out, "labeled")
    st = cfg.self_train_config(seed)
    model, hist = train_teacher(st, labeled, _val_if_needed(cfg, cfg.teacher, out))
    _print_history(hist)
    (out / "models").mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "models" / "teacher.pt", cfg.to_dict())
    doc = ex.new_document(cfg, "train-teacher")
    ex.record_model(doc, "teacher", model, hist, _dataset(out, "val"), st.teacher)
    _fragment(out, "train-teacher", doc)
    print(f"teacher val mIoU {ex.model_miou(doc, 'teacher'):.4f}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    cfg, out = _config(args), _out(args)
    teacher, _ = load_checkpoint(_require(out / "models" / "teacher.pt", "teacher checkpoint"))
    unlabeled = _dataset(out, "unlabeled")
    labels = make_pseudo_labels(teacher, unlabeled, cfg.self_train_config(cfg.seeds[0]))
    base = save_pseudo_labels(labels, out, image_root=str(out / "data" / "unlabeled"))
    print(f"{len(labels)} {labels.mode} pseudo labels -> {base}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg, out = _config(args), _out(args)
    seed = cfg.seeds[0]
    labeled = _dataset(out, "labeled")
    unlabeled = _dataset(out, "unlabeled")
    pseudo = load_pseudo_labels(_require(out / "pseudo" / "manifest.json", "pseudo labels").parent)
    st = cfg.self_train_config(seed)
    model, hist = train_student(st, labeled, pseudo, unlabeled, _val_if_needed(cfg, cfg.student, out))
    _print_history(hist)
    (out / "models").mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "models" / "student.pt", cfg.to_dict())
    doc = ex.new_document(cfg, "train-student")
    ex.record_model(doc, "student", model, hist, _dataset(out, "val"), st.student)
    _fragment(out, "train-student", doc)
    print(f"student val mIoU {ex.model_miou(doc, 'student'):.4f}")
    return EXIT_OK


def _print_history(hist):
    for r in hist:
        val = "" if r["val_miou"] is None else f" val_miou {r['val_miou']:.4f}"
        loss = "n/a" if r["loss"] is None else f"{r['loss']:.4f}"
        print(f"epoch {r['epoch']}: crop {r['crop']} batch {r['batch']} lr {r['lr']:.5f} "
              f"composition {r['n_real']} real / {r['n_pseudo']} pseudo loss {loss}{val}")


def cmd_evaluate(args) -> int:
    out = _out(args)
    data = load_dataset(_require(Path(args.data), "evaluation dataset")) if args.data else _dataset(out, "val")
    if args.pred_dir:
        pred_dir = _require(Path(args.pred_dir), "prediction directory")
        cm = ConfusionMatrix(data.num_classes)
        for sid in data.ids:
            cm.accumulate(read_mask(_require(pred_dir / f"{sid}.png", "prediction")), data.masks[sid])
        report = iou_report(cm)
        name = "predictions"
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else out / "models" / "student.pt"
        model, _ = load_checkpoint(_require(ckpt, "checkpoint"))
        doc = {"experiment_id": "evaluate", "config_digest": "", "models": {}, "timings": {}}
        entry = ex.record_model(doc, ckpt.stem, model, [], data)
        cm = ConfusionMatrix(len(entry["confusion"]), entry["confusion"])
        report = iou_report(cm)
        name = ckpt.stem
    result = {"experiment_id": f"evaluate/{name}", "config_digest": "", "models": {
        name: {"report": report.to_dict(), "confusion": cm.to_list(), "history": []}}, "timings": {}}
    _fragment(out, f"evaluate-{name}", result)
    print(f"{name}: mIoU {report.miou:.6f} over {report.pixel_count} pixels")
    for c, v in report.per_class.items():
        print(f"  class {c}: IoU {v:.4f}")
    if args.require_miou is not None and report.miou < args.require_miou:
        print(f"check failed: mIoU {report.miou:.6f} < required {args.require_miou}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment verbs


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out(args)
    doc = ex.run_ablation(cfg, args.arm)
    path = _fragment(out, f"ablate-{args.arm}", doc)
    write_report([doc], out / "report")
    _print_summary(doc)
    print(f"document: {path}")
    return EXIT_OK


def cmd_cross_domain(args) -> int:
    cfg, out = _config(args), _out(args)
    doc = ex.run_cross_domain(cfg, subsets=args.subsets)
    path = _fragment(out, "cross-domain", doc)
    write_report([doc], out / "report")
    _print_summary(doc)
    for g in doc["gap_summary"]:
        print(f"gap {g['subset']}: {g['median_gap']:+.4f}")
    print(f"document: {path}")
    return EXIT_OK


def _print_summary(doc):
    for row in doc["summary"]:
        print(f"{row['setting']:<28} median mIoU {row['median_miou']:.4f} (n={row['n']})")


def cmd_report(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        docs, skipped = load_documents(args.documents)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not docs:
        print("no readable metrics documents", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.report_dir) if args.report_dir else _out(args) / "report"
    for path in write_report(docs, out):
        print(path)
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = _config(args)
    spec = cfg.student
    if args.kind:
        spec = replace(spec, kind=args.kind)
    if args.warmup is not None:
        spec = replace(spec, warmup_epochs=args.warmup)
    if args.epochs is not None:
        spec = replace(spec, epochs=args.epochs)
    tc = spec.build(cfg.seeds[0])
    proxy = compute_cost_proxy(tc.crop_schedule)
    print(f"{'epoch':>5} {'crop':>5} {'batch':>5} {'lr':>10}")
    for row in schedule_table(tc.crop_schedule, tc.lr_policy, tc.batch_rule):
        print(f"{row.epoch:>5} {row.crop:>5} {row.batch:>5} {row.lr:>10.6f}")
    print(f"compute proxy: cost {proxy.cost:.4f} speedup {proxy.speedup:.4f}")
    if args.plot:
        Path(args.plot).parent.mkdir(parents=True, exist_ok=True)
        plot_schedules({tc.crop_schedule.kind: crop_series(tc.crop_schedule)}, args.plot)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="workspace directory (default $SELFTRAIN_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--workers", type=int, help="data-loading / indexing threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="selftrain", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", parents=[common], help="generate synthetic datasets")
    p.add_argument("--target", action="store_true", help="also generate the shifted target domain")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("build-index", parents=[common], help="build a centroid index")
    p.add_argument("--source", choices=("real", "pseudo"), default="real")
    p.add_argument("--per-image", action="store_true", help="one centroid per (image, class)")
    p.set_defaults(func=cmd_build_index)

    for name, func, text in (("train-teacher", cmd_train_teacher, "train the teacher on labelled data"),
                             ("pseudo-label", cmd_pseudo_label, "label the unlabeled pool with the teacher"),
                             ("train-student", cmd_train_student, "train the student on real + pseudo labels")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="mIoU of a checkpoint or a prediction directory")
    p.add_argument("--checkpoint", help="model checkpoint (default <out>/models/student.pt)")
    p.add_argument("--pred-dir", help="directory of <id>.png predicted masks")
    p.add_argument("--data", help="dataset directory (default <out>/data/val)")
    p.add_argument("--require-miou", type=float, help="exit 3 if mIoU is below this value")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation")
    p.add_argument("--arm", required=True, choices=ex.ARMS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cross-domain", parents=[common], help="finetune-only vs self-training on the target domain")
    p.add_argument("--subsets", nargs="+", help="subset sizes, e.g. 10-shot 1/10 full")
    p.set_defaults(func=cmd_cross_domain)

    p = sub.add_parser("report", parents=[common], help="plots and summary from metrics documents")
    p.add_argument("documents", nargs="+")
    p.add_argument("--report-dir", help="output directory (default <out>/report)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schedule", parents=[common], help="print the crop / batch / lr table")
    p.add_argument("--kind", choices=("constant", "coarse2fine", "fine2coarse", "coarse2fine_plus",
                                      "fine2coarse_plus", "coarse2fine+", "fine2coarse+"))
    p.add_argument("--warmup", type=int, help="warm-up epochs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--plot", help="write a PNG of the crop schedule")
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers or 1))
    try:
        return args.func(args)
    except (ex.ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
