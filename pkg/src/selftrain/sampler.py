"""Class-uniform centroid sampling, pseudo:real mixing, cropping and augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .maskops import IGNORE_INDEX, CentroidIndex


@dataclass(frozen=True)
class MixRatio:
    """``pseudo:real`` samples per epoch, e.g. ``MixRatio(7, 1)``."""

    pseudo: int
    real: int = 1

    def __post_init__(self):
        if self.pseudo < 0 or self.real < 1:
            raise ValueError(f"invalid mix ratio {self.pseudo}:{self.real}")

    @classmethod
    def parse(cls, text: str) -> MixRatio:
        try:
            pseudo, real = (int(v) for v in str(text).split(":"))
        except ValueError:
            raise ValueError(f"mix ratio must look like 'P:R', got {text!r}") from None
        return cls(pseudo, real)

    def __str__(self):
        return f"{self.pseudo}:{self.real}"

    def pseudo_count(self, n_real: int) -> int:
        if (n_real * self.pseudo) % self.real:
            raise ValueError(f"n_real={n_real} with ratio {self} gives a non-integral pseudo count")
        return n_real * self.pseudo // self.real


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    provenance: str
    anchor: tuple[float, float] | None
    crop_size: int
    aug_seed: int


@dataclass(frozen=True)
class EpochPlan:
    specs: tuple[SampleSpec, ...]
    seed: int
    n_real: int
    n_pseudo: int

    def __post_init__(self):
        tally = sum(s.provenance == "real" for s in self.specs)
        if tally != self.n_real or len(self.specs) - tally != self.n_pseudo:
            raise ValueError("plan counts do not match spec provenance tallies")

    def __len__(self):
        return len(self.specs)

    @property
    def counts(self) -> tuple[int, int]:
        return self.n_real, self.n_pseudo

    def to_records(self) -> list[dict]:
        return [asdict(s) for s in self.specs]


def save_plan(plan: EpochPlan, path) -> None:
    """Write a JSON-lines manifest: a header line then one record per spec."""
    lines = [json.dumps({"seed": plan.seed, "n_real": plan.n_real, "n_pseudo": plan.n_pseudo})]
    lines += [json.dumps(r) for r in plan.to_records()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path) -> EpochPlan:
    header, *rows = (json.loads(line) for line in Path(path).read_text().splitlines() if line)
    specs = tuple(
        SampleSpec(r["sample_id"], r["provenance"],
                   None if r["anchor"] is None else tuple(r["anchor"]), r["crop_size"], r["aug_seed"])
        for r in rows
    )
    return EpochPlan(specs, header["seed"], header["n_real"], header["n_pseudo"])


def _draw(index: CentroidIndex, n: int, rng: np.random.Generator, centroid_sampling: bool):
    """``n`` (sample_id, anchor) draws: uniform class, then uniform centroid."""
    if centroid_sampling:
        classes = index.class_ids
        picks_c = rng.integers(0, len(classes), size=n)
        out = []
        for ci in picks_c:
            entries = index.classes[classes[ci]]
            c = entries[int(rng.integers(0, len(entries)))]
            out.append((c.sample_id, (c.row, c.col)))
        return out
    ids = index.sample_ids()
    return [(ids[int(i)], None) for i in rng.integers(0, len(ids), size=n)]


def _unique_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(2**31 - 1, size=n, replace=False) if n else np.zeros(0, dtype=np.int64)


def _assemble(draws, crop_size, rng, seed):
    seeds = _unique_seeds(rng, len(draws))
    specs = [SampleSpec(sid, prov, anchor, crop_size, int(s)) for (sid, prov, anchor), s in zip(draws, seeds)]
    order = rng.permutation(len(specs))
    specs = tuple(specs[i] for i in order)
    n_real = sum(s.provenance == "real" for s in specs)
    return EpochPlan(specs, seed, n_real, len(specs) - n_real)


def plan_epoch(real_index: CentroidIndex, pseudo_index: CentroidIndex | None, n_real: int,
               ratio: MixRatio, crop_size: int, seed: int, centroid_sampling: bool = True) -> EpochPlan:
    """Compose one epoch of ``n_real`` real and ``n_real * ratio`` pseudo samples.

    With ``centroid_sampling`` each draw picks a class uniformly among the
    classes present in the relevant index and then one of its centroids
    uniformly; the centroid becomes the crop anchor. Without it, a sample is
    picked uniformly and cropped at a random position.
    """
    if n_real < 1:
        raise ValueError("n_real must be >= 1")
    if crop_size < 1:
        raise ValueError("crop_size must be >= 1")
    n_pseudo = ratio.pseudo_count(n_real)
    if real_index.is_empty():
        raise ValueError("real index is empty")
    if n_pseudo and (pseudo_index is None or pseudo_index.is_empty()):
        raise ValueError(f"ratio {ratio} needs pseudo samples but the pseudo index is empty")
    rng = np.random.default_rng(seed)
    draws = [(sid, "real", a) for sid, a in _draw(real_index, n_real, rng, centroid_sampling)]
    if n_pseudo:
        draws += [(sid, "pseudo", a) for sid, a in _draw(pseudo_index, n_pseudo, rng, centroid_sampling)]
    return _assemble(draws, crop_size, rng, seed)


def plan_duplicated(real_index: CentroidIndex, n_real: int, k: int, crop_size: int, seed: int,
                    centroid_sampling: bool = True) -> EpochPlan:
    """Real-only plan where each of ``n_real`` draws is repeated ``k`` times.

    Every copy gets its own augmentation seed. ``k=1`` reproduces
    ``plan_epoch`` with ratio ``0:1`` exactly.
    """
    if k < 1:
        raise ValueError("duplication factor k must be >= 1")
    if n_real < 1:
        raise ValueError("n_real must be >= 1")
    if real_index.is_empty():
        raise ValueError("real index is empty")
    rng = np.random.default_rng(seed)
    base = [(sid, "real", a) for sid, a in _draw(real_index, n_real, rng, centroid_sampling)]
    return _assemble(base * k, crop_size, rng, seed)


def plan_from_index(index: CentroidIndex, n: int, crop_size: int, seed: int,
                    centroid_sampling: bool = True) -> EpochPlan:
    """Single-source plan, labelled with the index's own provenance."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if index.is_empty():
        raise ValueError(f"{index.provenance} index is empty")
    rng = np.random.default_rng(seed)
    draws = [(sid, index.provenance, a) for sid, a in _draw(index, n, rng, centroid_sampling)]
    return _assemble(draws, crop_size, rng, seed)


# ---------------------------------------------------------------------------
# cropping


def _window(length: int, center: int | None, size: int, rng) -> tuple[int, int, int]:
    """Return (start, stop, pad_before) along one axis."""
    if length < size:
        return 0, length, (size - length) // 2
    if center is None:
        start = int(rng.integers(0, length - size + 1))
    else:
        start = min(max(center - size // 2, 0), length - size)
    return start, start + size, 0


def _place(arr, rows, cols, size, fill):
    out = np.full((size, size) + arr.shape[2:], fill, dtype=arr.dtype)
    (r0, r1, pr), (c0, c1, pc) = rows, cols
    out[pr:pr + r1 - r0, pc:pc + c1 - c0] = arr[r0:r1, c0:c1]
    return out


def crop_at(image: np.ndarray, mask: np.ndarray, anchor: tuple[float, float] | None, crop_size: int,
            rng: np.random.Generator | None = None, soft: np.ndarray | None = None):
    """Cut a ``crop_size`` square around ``anchor``, shifted to stay on-image.

    Images smaller than the crop are padded symmetrically, with zeros for the
    image and the ignore value for the mask. ``anchor=None`` selects a random
    window using ``rng``. A per-pixel ``soft`` target, when given, is cut the
    same way (padding zero) and returned as a third element.
    """
    if crop_size < 1:
        raise ValueError("crop_size must be >= 1")
    h, w = mask.shape
    if image.shape[:2] != (h, w):
        raise ValueError("image and mask sizes differ")
    if anchor is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        cr = cc = None
    else:
        row, col = anchor
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"anchor {anchor} outside image of size {h}x{w}")
        cr, cc = int(np.floor(row)), int(np.floor(col))
    rows = _window(h, cr, crop_size, rng)
    cols = _window(w, cc, crop_size, rng)
    out = (_place(image, rows, cols, crop_size, 0), _place(mask, rows, cols, crop_size, IGNORE_INDEX))
    if soft is not None:
        out += (_place(soft, rows, cols, crop_size, 0),)
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugParams:
    scale_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    blur: bool = True
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    color_jitter: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        for p in (self.hflip_prob, self.blur_prob):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.color_jitter < 0:
            raise ValueError("color_jitter must be non-negative")


NO_AUG = AugParams(scale_range=(1.0, 1.0), hflip_prob=0.0, blur=False, color_jitter=0.0)


def _source_coords(out_len: int, in_len: int) -> np.ndarray:
    # pixel-centre mapping shared by the nearest and bilinear resamplers
    return (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5


def rescale(image, mask, factor: float, soft=None):
    """Resize by ``factor``: bilinear for the image, nearest for labels."""
    h, w = mask.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return (image, mask) if soft is None else (image, mask, soft)
    ry, rx = _source_coords(nh, h), _source_coords(nw, w)
    ni = np.clip(np.floor(ry + 0.5).astype(int), 0, h - 1)
    nj = np.clip(np.floor(rx + 0.5).astype(int), 0, w - 1)
    out_mask = mask[np.ix_(ni, nj)]
    gy, gx = np.meshgrid(np.clip(ry, 0, h - 1), np.clip(rx, 0, w - 1), indexing="ij")
    channels = [ndimage.map_coordinates(image[..., ch], [gy, gx], order=1, mode="nearest")
                for ch in range(image.shape[2])]
    out_image = np.stack(channels, axis=-1).astype(image.dtype)
    if soft is None:
        return out_image, out_mask
    return out_image, out_mask, soft[np.ix_(ni, nj)]


def center_fit(arr, size: tuple[int, int], fill):
    """Centre-crop or centre-pad ``arr`` to ``size``."""
    h, w = arr.shape[:2]
    th, tw = size
    out = np.full((th, tw) + arr.shape[2:], fill, dtype=arr.dtype)
    sy, dy = max(0, (h - th) // 2), max(0, (th - h) // 2)
    sx, dx = max(0, (w - tw) // 2), max(0, (tw - w) // 2)
    ch, cw = min(h, th), min(w, tw)
    out[dy:dy + ch, dx:dx + cw] = arr[sy:sy + ch, sx:sx + cw]
    return out


def hflip(image, mask, soft=None):
    out = (image[:, ::-1].copy(), mask[:, ::-1].copy())
    return out if soft is None else out + (soft[:, ::-1].copy(),)


def augment(image: np.ndarray, mask: np.ndarray, params: AugParams, seed: int, soft: np.ndarray | None = None):
    """Random scale, flip, blur and colour jitter, in that order.

    ``image`` is ``H x W x 3`` float in [0, 1]. Geometric steps are applied
    identically to the mask (nearest-neighbour) and to ``soft`` if given;
    blur and jitter touch the image only. The output has the input size:
    upscaled results are centre-cropped, downscaled ones centre-padded with
    zeros / ignore. Random draws happen in a fixed order regardless of which
    steps are enabled, so a seed always means the same geometry.
    """
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask sizes differ")
    rng = np.random.default_rng(seed)
    lo, hi = params.scale_range
    factor = float(rng.uniform(lo, hi)) if hi > lo else lo
    flip = rng.random() < params.hflip_prob
    do_blur = rng.random() < params.blur_prob
    sigma = float(rng.uniform(*params.blur_sigma))
    jitter = rng.uniform(-1.0, 1.0, size=3) * params.color_jitter
    shape = mask.shape

    out = rescale(image, mask, factor, soft)
    if factor != 1.0:
        out = (center_fit(out[0], shape, 0.0), center_fit(out[1], shape, IGNORE_INDEX)) + \
              tuple(center_fit(a, shape, 0.0) for a in out[2:])
    if flip:
        out = hflip(*out)
    img = out[0]
    if params.blur and do_blur:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    if params.color_jitter:
        brightness, contrast, saturation = 1.0 + jitter
        mean = img.mean()
        gray = img.mean(axis=2, keepdims=True)
        img = (img - gray) * saturation + gray
        img = (img - mean) * contrast + mean
        img = np.clip(img * brightness, 0.0, 1.0)
    return (img.astype(np.float32, copy=False),) + tuple(out[1:])
