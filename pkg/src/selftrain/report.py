"""Plots and text summaries rendered from stored metrics documents.

Nothing here recomputes a metric: every number printed or plotted is read
from a document as stored.
"""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .schedules import CropSchedule, crop_for_epoch  # noqa: E402

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("experiment_id", "config_digest", "models")


class CorruptDocumentWarning(UserWarning):
    pass


def load_documents(paths) -> tuple[list[dict], list[str]]:
    """Parse documents, skipping (with a warning) any that are unreadable or malformed."""
    docs, skipped = [], []
    for path in paths:
        try:
            doc = json.loads(Path(path).read_text())
            if not isinstance(doc, dict) or any(k not in doc for k in REQUIRED_KEYS):
                raise ValueError("missing required keys")
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping {path}: {exc}", CorruptDocumentWarning, stacklevel=2)
            skipped.append(str(path))
            continue
        doc["_path"] = str(path)
        docs.append(doc)
    return docs, skipped


def plot_curves(doc: dict, path) -> Path:
    """One curve per trained model: validation mIoU per epoch, or loss if no validation was run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    use_val = any(r.get("val_miou") is not None for m in doc["models"].values() for r in m["history"])
    key = "val_miou" if use_val else "loss"
    for name, model in doc["models"].items():
        pts = [(r["epoch"], r[key]) for r in model["history"] if r.get(key) is not None]
        if pts:
            ax.plot(*zip(*pts), label=name, linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation mIoU" if use_val else "training loss")
    ax.set_title(doc["experiment_id"])
    if len(doc["models"]) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def crop_series(schedule: CropSchedule) -> list[int]:
    return [crop_for_epoch(schedule, e) for e in range(schedule.total_epochs)]


def plot_schedules(series: dict[str, list[int]], path) -> Path:
    """Crop size against epoch for each named crop sequence."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, crops in series.items():
        ax.step(range(len(crops)), crops, where="post", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("crop size")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_summary(doc: dict, path) -> Path | None:
    """Bar chart of per-setting medians (ablations) or the gap curve (cross-domain)."""
    if doc.get("gap_summary"):
        settings = [g["subset"] for g in doc["gap_summary"]]
        fig, ax = plt.subplots(figsize=(7, 4))
        for arm in ("finetune", "self-training"):
            med = {s["setting"]: s["median_miou"] for s in doc["summary"]}
            ax.plot(settings, [med.get(f"{s} {arm}") for s in settings], marker="o", label=arm)
        ax.set_xlabel("labelled target subset")
        ax.set_ylabel("target mIoU (median over seeds)")
        ax.legend()
    elif doc.get("summary"):
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(doc["summary"])), 4))
        ax.bar([s["setting"] for s in doc["summary"]], [s["median_miou"] for s in doc["summary"]])
        ax.set_ylabel("mIoU (median over seeds)")
        ax.tick_params(axis="x", rotation=60, labelsize=7)
    else:
        return None
    ax.set_title(doc["experiment_id"])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def summary_text(docs: list[dict]) -> str:
    """Every stored mIoU, printed with ``repr`` so values round-trip exactly."""
    lines = []
    for doc in docs:
        lines.append(f"# {doc['experiment_id']}  (config {doc['config_digest']})")
        for name, model in doc["models"].items():
            lines.append(f"model {name}: miou={model['report']['miou']!r}")
        for row in doc.get("summary", []):
            lines.append(f"setting {row['setting']}: median_miou={row['median_miou']!r} over {row['n']} seed(s)")
        for gap in doc.get("gap_summary", []):
            lines.append(f"gap {gap['subset']}: median={gap['median_gap']!r}")
        lines.append("")
    return "\n".join(lines)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def write_report(docs: list[dict], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for doc in docs:
        stem = _safe(doc["experiment_id"])
        written.append(plot_curves(doc, out / f"{stem}_curves.png"))
        summary = plot_summary(doc, out / f"{stem}_summary.png")
        if summary is not None:
            written.append(summary)
        schedules = _schedules_of(doc)
        if schedules:
            written.append(plot_schedules(schedules, out / f"{stem}_schedules.png"))
    text = out / "summary.txt"
    text.write_text(summary_text(docs))
    written.append(text)
    return written


def _schedules_of(doc: dict) -> dict[str, list[int]]:
    """Distinct crop sequences from the stored per-model schedule tables."""
    out, seen = {}, set()
    for name, model in doc["models"].items():
        crops = tuple(r["crop"] for r in model.get("schedule") or ())
        if crops and crops not in seen:
            seen.add(crops)
            out[name.split("/", 1)[-1]] = list(crops)
    return out
