"""Teacher inference into hard or soft pseudo labels, with optional confidence filtering."""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .maskops import IGNORE_INDEX
from .model import SegModel, predict_proba

SOFT_SCALE = 65535


@dataclass(frozen=True)
class ConfidenceFilter:
    threshold: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass
class PseudoLabelSet:
    """Pseudo labels keyed by sample id.

    ``masks`` hold argmax class ids (ignore where filtered); ``confidence``
    the per-pixel max probability; ``soft`` (soft mode only) the quantised
    class distribution as ``H x W x C`` uint16 fractions of 65535.
    """

    masks: dict[str, np.ndarray]
    mode: str = "hard"
    teacher_tag: str = ""
    confidence: dict[str, np.ndarray] | None = None
    soft: dict[str, np.ndarray] | None = None
    threshold: float | None = None
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.mode == "hard" and self.soft is not None:
            raise ValueError("hard-mode pseudo labels carry no distributions")
        if self.mode == "soft" and self.soft is None:
            raise ValueError("soft-mode pseudo labels need a distribution store")

    @property
    def ids(self) -> list[str]:
        return sorted(self.masks)

    def __len__(self):
        return len(self.masks)

    def distribution(self, sample_id: str) -> np.ndarray:
        """Dequantised ``H x W x C`` float32 distribution (soft mode)."""
        if self.soft is None:
            raise ValueError("no soft distributions stored")
        return dequantize(self.soft[sample_id])


def quantize(probs: np.ndarray) -> np.ndarray:
    """Quantise ``... x C`` distributions to uint16 fractions summing to 65535.

    Largest-remainder rounding, then the original argmax class is topped up
    (taking units from the competitors) whenever rounding tied or overtook
    it, so the argmax of the stored distribution equals the argmax of the
    input under lowest-index tie-breaking.
    """
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum(axis=-1, keepdims=True)
    scaled = p * SOFT_SCALE
    q = np.floor(scaled).astype(np.int64)
    short = SOFT_SCALE - q.sum(axis=-1)
    rem = scaled - q
    # hand the missing units to the largest remainders (stable order)
    order = np.argsort(-rem, axis=-1, kind="stable")
    ranks = np.argsort(order, axis=-1, kind="stable")
    q += ranks < short[..., None]

    top = p.argmax(axis=-1)
    flat_q = q.reshape(-1, q.shape[-1])
    flat_top = top.reshape(-1)
    rows = np.arange(flat_q.shape[0])
    for _ in range(flat_q.shape[1]):
        winner = flat_q.argmax(axis=1)
        bad = winner != flat_top
        if not bad.any():
            break
        r = rows[bad]
        need = flat_q[r, winner[bad]] - flat_q[r, flat_top[bad]] + (winner[bad] < flat_top[bad])
        flat_q[r, winner[bad]] -= need
        flat_q[r, flat_top[bad]] += need
    return flat_q.reshape(q.shape).astype(np.uint16)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float64) / SOFT_SCALE).astype(np.float32)


def generate(teacher: SegModel, images: Iterable[tuple[str, np.ndarray]], mode: str = "hard",
             keep_confidence: bool = True, batch_size: int = 32) -> PseudoLabelSet:
    """Label ``(sample_id, image)`` pairs with the teacher's predictions.

    Hard mode keeps the per-pixel argmax, ties going to the lowest class id.
    Soft mode also stores the full distribution.
    """
    if mode not in ("hard", "soft"):
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    items = list(images)
    masks, conf, soft = {}, {}, {}
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        arr = np.stack([np.asarray(img) for _, img in chunk])
        if arr.ndim != 4 or arr.shape[-1] != teacher.in_channels:
            raise ValueError(
                f"teacher expects {teacher.in_channels}-channel images, got shape {arr.shape[1:]}"
            )
        probs = predict_proba(teacher, arr, batch_size=batch_size)
        for (sid, _), p in zip(chunk, probs):
            masks[sid] = p.argmax(axis=-1).astype(np.uint8)
            if keep_confidence:
                conf[sid] = p.max(axis=-1).astype(np.float32)
            if mode == "soft":
                soft[sid] = quantize(p)
    return PseudoLabelSet(
        masks=masks,
        mode=mode,
        teacher_tag=teacher.tag,
        confidence=conf if keep_confidence else None,
        soft=soft if mode == "soft" else None,
        num_classes=teacher.num_classes,
    )


def apply_confidence_filter(labels: PseudoLabelSet, flt: ConfidenceFilter) -> PseudoLabelSet:
    """Set pixels whose max probability is below the threshold to ignore."""
    if not flt.enabled:
        return labels
    if labels.mode != "hard":
        raise ValueError("confidence filtering applies to hard pseudo labels")
    if labels.confidence is None:
        raise ValueError("confidence filtering needs the per-pixel probability maps")
    masks = {}
    for sid, mask in labels.masks.items():
        out = mask.copy()
        out[labels.confidence[sid] < flt.threshold] = IGNORE_INDEX
        masks[sid] = out
    return replace(labels, masks=masks, threshold=flt.threshold)


def save_pseudo_labels(labels: PseudoLabelSet, root, image_root: str | None = None) -> Path:
    """Write ``<root>/pseudo/masks/<id>.png`` plus arrays and a JSON manifest."""
    from .datasets import write_mask

    base = Path(root) / "pseudo"
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for sid in labels.ids:
        write_mask(base / "masks" / f"{sid}.png", labels.masks[sid])
    if labels.confidence is not None:
        np.savez_compressed(base / "confidence.npz", **labels.confidence)
    if labels.soft is not None:
        np.savez_compressed(base / "soft.npz", **labels.soft)
    manifest = {
        "version": 1,
        "mode": labels.mode,
        "threshold": labels.threshold,
        "teacher_tag": labels.teacher_tag,
        "num_classes": labels.num_classes,
        "image_root": image_root,
        "ids": labels.ids,
    }
    (base / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return base


def load_pseudo_labels(root) -> PseudoLabelSet:
    from .datasets import read_mask

    base = Path(root)
    if (base / "pseudo" / "manifest.json").exists():
        base = base / "pseudo"
    manifest = json.loads((base / "manifest.json").read_text())
    masks = {sid: read_mask(base / "masks" / f"{sid}.png") for sid in manifest["ids"]}
    conf = soft = None
    if (base / "confidence.npz").exists():
        with np.load(base / "confidence.npz") as z:
            conf = {k: z[k] for k in z.files}
    if (base / "soft.npz").exists():
        with np.load(base / "soft.npz") as z:
            soft = {k: z[k] for k in z.files}
    return PseudoLabelSet(masks, manifest["mode"], manifest["teacher_tag"], conf, soft,
                          manifest["threshold"], manifest["num_classes"],
                          {"image_root": manifest.get("image_root")})
