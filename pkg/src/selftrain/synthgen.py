"""Deterministic synthetic driving-like scenes with pixel-exact labels.

Class 0 fills whatever no object covers (the dominant "road"). Every other
class is drawn as horizontal bands, rectangles, ellipses or polylines with
its own colour, texture pattern and expected pixel share. Object counts are
Poisson with mean ``share * H * W / mean_area``. That reproduces strong class
imbalance, while a few classes share colours and differ only by pattern,
which gives the model real confusions to learn.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .datasets import SegDataset, write_image, write_mask

SHAPES = ("fill", "band", "rect", "ellipse", "polyline")
PATTERNS = ("none", "stripes", "checker")


class UnrenderableConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    """One semantic class.

    ``size`` is the primary extent in pixels: band thickness, rectangle
    height, ellipse semi-axis or polyline length. ``aspect`` scales the
    secondary extent (rectangle width, ellipse x semi-axis, polyline
    thickness in pixels).
    """

    name: str
    shape: str = "rect"
    size: tuple[int, int] = (4, 8)
    aspect: tuple[float, float] = (1.0, 1.0)
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    color_jitter: float = 0.03
    texture: float = 0.03
    pattern: str = "none"
    share: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.size[0] < 1 or self.size[1] < self.size[0]:
            raise ValueError(f"invalid size range {self.size}")
        if self.share < 0:
            raise ValueError("share must be non-negative")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    classes: tuple[ClassSpec, ...] = ()
    clutter: tuple[int, int] = (0, 64)
    illumination: tuple[float, float] = (0.92, 1.08)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("at least one class (the fill class) is required")
        if self.classes[0].shape != "fill":
            raise ValueError("class 0 must be the 'fill' (dominant background) class")
        if any(c.shape == "fill" for c in self.classes[1:]):
            raise ValueError("only class 0 may use the 'fill' shape")
        shares = [c.share for c in self.classes[1:]]
        if sum(shares) > 1.0:
            raise ValueError("object class shares must sum to <= 1")
        if any(s <= 0 for s in shares):
            raise ValueError("object class shares must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> SceneConfig:
        classes = tuple(ClassSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
                        for c in doc["classes"])
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items() if k != "classes"}
        return cls(classes=classes, **rest)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DomainConfig:
    """A target domain: palette/texture/geometry shifts plus new classes.

    ``new_classes`` holds ``(class_id, ClassSpec)`` pairs whose ids must
    continue the source numbering.
    """

    palette_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    palette_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture_delta: float = 0.0
    geometry_scale: float = 1.0
    new_classes: tuple[tuple[int, ClassSpec], ...] = ()

    def __post_init__(self):
        if any(abs(v) > 0.3 for v in self.palette_shift):
            raise ValueError("palette shift components must lie in [-0.3, 0.3]")
        if not 0.5 <= self.geometry_scale <= 2.0:
            raise ValueError("geometry_scale must lie in [0.5, 2.0]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> DomainConfig:
        new = tuple((int(i), ClassSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}))
                    for i, c in doc.get("new_classes", ()))
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items() if k != "new_classes"}
        return cls(new_classes=new, **rest)


def default_scene_config(height: int = 64, width: int = 64) -> SceneConfig:
    """Six classes with pixel shares from ~0.6 (road) down to 0.002 (sign)."""
    return SceneConfig(height, width, classes=(
        ClassSpec("road", "fill", color=(0.36, 0.36, 0.39), texture=0.03),
        ClassSpec("building", "rect", (12, 26), (0.6, 1.5), (0.56, 0.42, 0.34), 0.04, 0.03, "checker", 0.20),
        ClassSpec("vegetation", "ellipse", (5, 11), (0.7, 1.4), (0.26, 0.54, 0.25), 0.04, 0.07, "none", 0.12),
        ClassSpec("sidewalk", "band", (3, 7), (1.0, 1.0), (0.52, 0.48, 0.45), 0.02, 0.03, "stripes", 0.10),
        ClassSpec("car", "rect", (4, 7), (1.4, 2.2), (0.22, 0.30, 0.68), 0.05, 0.03, "none", 0.035),
        ClassSpec("sign", "ellipse", (2, 3), (0.8, 1.25), (0.84, 0.78, 0.22), 0.03, 0.03, "none", 0.002),
    ))


def with_imbalance(config: SceneConfig, ratio: float) -> SceneConfig:
    """Rescale the rarest class's share so nominal dominant:rare equals ``ratio``.

    The nominal dominant share is ``1 - sum(object shares)``; overlap
    between objects makes the measured ratio somewhat larger.
    """
    shares = [c.share for c in config.classes[1:]]
    rare = 1 + int(np.argmin(shares))
    others = sum(shares) - shares[rare - 1]
    new_share = (1.0 - others) / (ratio + 1.0)
    classes = list(config.classes)
    classes[rare] = replace(classes[rare], share=new_share)
    return replace(config, classes=tuple(classes))


def default_domain_config() -> DomainConfig:
    """Warmer, brighter palette, coarser texture, larger objects and three new classes."""
    return DomainConfig(
        palette_shift=(0.10, -0.04, 0.06),
        texture_delta=0.02,
        geometry_scale=1.15,
        new_classes=(
            (6, ClassSpec("bike_lane", "band", (3, 6), (1.0, 1.0), (0.62, 0.30, 0.30), 0.02, 0.03, "stripes", 0.05)),
            (7, ClassSpec("bin", "rect", (3, 6), (0.6, 1.0), (0.12, 0.13, 0.12), 0.02, 0.02, "none", 0.012)),
            (8, ClassSpec("pole", "polyline", (10, 22), (1.0, 2.0), (0.80, 0.80, 0.86), 0.02, 0.02, "none", 0.010)),
        ),
    )


def shift_domain(config: SceneConfig, domain: DomainConfig) -> SceneConfig:
    """Target-domain config: shifted source classes, then the new classes appended."""
    n_src = config.num_classes
    ids = [i for i, _ in domain.new_classes]
    if len(set(ids)) != len(ids) or any(i < n_src for i in ids):
        raise ValueError(f"new class ids {ids} collide with existing ids [0, {n_src})")
    if sorted(ids) != list(range(n_src, n_src + len(ids))):
        raise ValueError(f"new class ids {ids} must continue the numbering from {n_src}")

    def shifted(c: ClassSpec) -> ClassSpec:
        color = tuple(float(np.clip(v * g + d, 0.0, 1.0))
                      for v, g, d in zip(c.color, domain.palette_gain, domain.palette_shift))
        if c.shape == "fill":
            size = c.size
        else:
            size = (max(1, int(round(c.size[0] * domain.geometry_scale))),
                    max(1, int(round(c.size[1] * domain.geometry_scale))))
        return replace(c, color=color, texture=max(0.0, c.texture + domain.texture_delta), size=size)

    if domain == DomainConfig():
        return config
    classes = tuple(shifted(c) for c in config.classes)
    classes += tuple(spec for _, spec in sorted(domain.new_classes, key=lambda t: t[0]))
    return replace(config, classes=classes)


# ---------------------------------------------------------------------------
# rendering


def _footprint(spec: ClassSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterise one object of ``spec`` at a random on-canvas position."""
    lo, hi = spec.size
    s = int(rng.integers(lo, hi + 1))
    a = float(rng.uniform(*spec.aspect))
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    if spec.shape == "band":
        if s > height:
            raise UnrenderableConfigError(f"{spec.name}: band thickness {s} exceeds canvas height {height}")
        top = int(rng.integers(0, height - s + 1))
        draw.rectangle([0, top, width - 1, top + s - 1], fill=1)
    elif spec.shape == "rect":
        h, w = s, max(1, int(round(s * a)))
        if h > height or w > width:
            raise UnrenderableConfigError(f"{spec.name}: {h}x{w} object exceeds canvas {height}x{width}")
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        draw.rectangle([left, top, left + w - 1, top + h - 1], fill=1)
    elif spec.shape == "ellipse":
        ry, rx = s, max(1, int(round(s * a)))
        if 2 * ry + 1 > height or 2 * rx + 1 > width:
            raise UnrenderableConfigError(f"{spec.name}: ellipse {ry}x{rx} exceeds canvas {height}x{width}")
        cy = int(rng.integers(ry, height - ry))
        cx = int(rng.integers(rx, width - rx))
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=1)
    elif spec.shape == "polyline":
        thick = max(1, int(round(a)))
        if s > height:
            raise UnrenderableConfigError(f"{spec.name}: polyline length {s} exceeds canvas height {height}")
        top = int(rng.integers(0, height - s + 1))
        x0 = int(rng.integers(thick, width - thick))
        bend = int(rng.integers(-2, 3))
        mid = top + s // 2
        x1 = int(np.clip(x0 + bend, 0, width - 1))
        draw.line([(x0, top), (x0, mid), (x1, top + s - 1)], fill=1, width=thick)
    else:
        raise UnrenderableConfigError(f"{spec.name}: shape {spec.shape!r} cannot be placed as an object")
    return np.asarray(canvas, dtype=bool)


@lru_cache(maxsize=256)
def mean_object_area(spec: ClassSpec, height: int, width: int, trials: int = 400) -> float:
    """Monte-Carlo mean footprint area of one object (fixed RNG, so deterministic)."""
    rng = np.random.default_rng(12345)
    return float(np.mean([_footprint(spec, height, width, rng).sum() for _ in range(trials)]))


def _pattern(kind: str, height: int, width: int, phase: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if kind == "stripes":
        return np.broadcast_to(((rows + phase) // 3 % 2) * 2.0 - 1.0, (height, width))
    if kind == "checker":
        return (((rows + phase) // 3 + (cols + phase) // 3) % 2) * 2.0 - 1.0
    return np.zeros((height, width))


@dataclass
class Scene:
    image: np.ndarray
    mask: np.ndarray
    objects: list[tuple[int, np.ndarray]] = field(default_factory=list)


def _paint_order(config: SceneConfig) -> list[int]:
    # bands first so they read as ground; everything else by class id
    return sorted(range(1, config.num_classes), key=lambda i: (config.classes[i].shape != "band", i))


def render_scene(config: SceneConfig, seed: int) -> Scene:
    """Render one scene, also returning every object's full footprint in paint order."""
    h, w = config.height, config.width
    rng = np.random.default_rng(seed)
    counts = {}
    for cid in _paint_order(config):
        spec = config.classes[cid]
        lam = spec.share * h * w / mean_object_area(spec, h, w)
        counts[cid] = int(rng.poisson(lam))
    total = sum(counts.values())
    lo, hi = config.clutter
    if total > hi:
        # trim the most numerous classes first, keeping every class's first object
        for cid in sorted(counts, key=lambda c: -counts[c]):
            cut = min(total - hi, counts[cid] - 1)
            if cut > 0:
                counts[cid] -= cut
                total -= cut

    mask = np.zeros((h, w), dtype=np.uint8)
    objects = []
    for cid in _paint_order(config):
        spec = config.classes[cid]
        for _ in range(counts[cid]):
            fp = _footprint(spec, h, w, rng)
            mask[fp] = cid
            objects.append((cid, fp))

    image = np.zeros((h, w, 3))
    light = rng.uniform(*config.illumination)
    for cid, spec in enumerate(config.classes):
        region = mask == cid
        if not region.any():
            continue
        color = np.asarray(spec.color) + rng.normal(0.0, spec.color_jitter, 3)
        pat = _pattern(spec.pattern, h, w, int(rng.integers(0, 6)))[region]
        noise = rng.normal(0.0, spec.texture, (int(region.sum()), 3))
        image[region] = color + 0.06 * pat[:, None] + noise
    image = np.clip(image * light, 0.0, 1.0)
    return Scene((image * 255.0 + 0.5).astype(np.uint8), mask, objects)


def generate_scene(config: SceneConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    scene = render_scene(config, seed)
    return scene.image, scene.mask


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def generate_split(n: int, config: SceneConfig, seed: int, name: str = "") -> SegDataset:
    """Render ``n`` scenes in memory with ids ``00000..``."""
    images, masks = {}, {}
    for i, s in enumerate(scene_seeds(seed, n)):
        sid = f"{i:05d}"
        images[sid], masks[sid] = generate_scene(config, s)
    return SegDataset(images, masks, config.num_classes, name)


def class_table(config: SceneConfig) -> list[dict]:
    return [{"id": i, "name": c.name} for i, c in enumerate(config.classes)]


def generate_dataset(n: int, config: SceneConfig, seed: int, out_dir, name: str = "") -> dict:
    """Write ``n`` scenes plus a manifest; the manifest appears only if every file was written."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    seeds = scene_seeds(seed, n)
    scenes = []
    for i, s in enumerate(seeds):
        sid = f"{i:05d}"
        image, mask = generate_scene(config, s)
        write_image(out / "images" / f"{sid}.png", image)
        write_mask(out / "masks" / f"{sid}.png", mask)
        scenes.append({"id": sid, "seed": s, "classes": sorted(int(c) for c in np.unique(mask))})
    manifest = {
        "version": 1,
        "name": name or out.name,
        "seed": seed,
        "ids": [s["id"] for s in scenes],
        "seeds": seeds,
        "scenes": scenes,
        "config_digest": config.digest(),
        "config": config.to_dict(),
        "classes": class_table(config),
    }
    text = json.dumps(manifest, indent=1) + "\n"
    tmp = out / "manifest.json.tmp"
    tmp.write_text(text)
    os.replace(tmp, manifest_path)
    return json.loads(text)


def class_presence(dataset: SegDataset) -> dict[str, list[int]]:
    return {sid: sorted(int(c) for c in np.unique(dataset.masks[sid]) if c != 255) for sid in dataset.ids}


def select_k_shot(manifest: dict, k: int, seed: int) -> dict:
    """Subset manifest in which every class is contained in at least ``k`` scenes.

    Randomised greedy multicover followed by pruning of redundant scenes,
    so the result is inclusion-minimal and has at most ``k * C`` scenes.
    """
    presence = {s["id"]: s["classes"] for s in manifest["scenes"]}
    num_classes = len(manifest["classes"])
    chosen = select_k_shot_ids(presence, num_classes, k, seed)
    keep = set(chosen)
    sub = dict(manifest)
    sub["scenes"] = [s for s in manifest["scenes"] if s["id"] in keep]
    sub["ids"] = [s["id"] for s in sub["scenes"]]
    sub["seeds"] = [s["seed"] for s in sub["scenes"]]
    sub["k_shot"] = k
    return sub


def select_k_shot_ids(presence: dict[str, list[int]], num_classes: int, k: int, seed: int) -> list[str]:
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    support = np.zeros(num_classes, dtype=int)
    for classes in presence.values():
        for c in classes:
            support[c] += 1
    short = [c for c in range(num_classes) if support[c] < k]
    if short:
        raise ValueError(f"infeasible {k}-shot selection; classes with fewer than {k} scenes: {short}")

    ids = sorted(presence)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    need = np.full(num_classes, k)
    chosen = []
    remaining = list(order)
    while need.any():
        best, best_gain = None, 0
        for sid in remaining:
            gain = sum(1 for c in presence[sid] if need[c] > 0)
            if gain > best_gain:
                best, best_gain = sid, gain
        chosen.append(best)
        remaining.remove(best)
        for c in presence[best]:
            need[c] = max(0, need[c] - 1)

    cover = np.zeros(num_classes, dtype=int)
    for sid in chosen:
        for c in presence[sid]:
            cover[c] += 1
    for sid in reversed(list(chosen)):
        if all(cover[c] > k for c in presence[sid]):
            chosen.remove(sid)
            for c in presence[sid]:
                cover[c] -= 1
    return sorted(chosen)
