"""Label-mask analytics: connected components, centroids and the centroid index.

A label mask is a 2-D ``uint8`` array of class ids in ``[0, C)`` with 255
reserved as the ignore value. Instances are the connected components of each
class; their arithmetic-mean positions become crop anchors for class-balanced
sampling.
"""

from __future__ import annotations

import json
import os
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IGNORE_INDEX = 255
INDEX_VERSION = 1

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


class MaskValidationError(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


def validate_mask(mask, num_classes: int | None = None) -> np.ndarray:
    """Return ``mask`` as a 2-D integer array, raising on malformed content.

    Values must lie in ``[0, num_classes)`` or equal the ignore value. With
    ``num_classes=None`` any value below 255 is accepted.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise MaskValidationError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise MaskValidationError(f"mask must hold integer class ids, got dtype {arr.dtype}")
    limit = IGNORE_INDEX if num_classes is None else num_classes
    bad = ((arr < 0) | (arr >= limit)) & (arr != IGNORE_INDEX)
    if bad.any():
        r, c = (int(v) for v in np.argwhere(bad)[0])
        raise MaskValidationError(
            f"pixel ({r}, {c}) has value {int(arr[r, c])}, outside [0, {limit}) and not {IGNORE_INDEX}"
        )
    return arr


@dataclass(frozen=True, eq=False)
class Component:
    """One maximal connected region of a single class.

    ``pixels`` is an ``(area, 2)`` array of ``(row, col)`` coordinates in
    raster order.
    """

    class_id: int
    pixels: np.ndarray

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        rmin, cmin = self.pixels.min(axis=0)
        rmax, cmax = self.pixels.max(axis=0)
        return int(rmin), int(cmin), int(rmax), int(cmax)

    def pixel_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.pixels}


def connected_components(mask, connectivity: int = 4, num_classes: int | None = None) -> list[Component]:
    """Split every non-ignore class region of ``mask`` into connected components.

    Output is ordered by ``(class_id, row_min, col_min)``; the first pixel in
    raster order breaks the (rare) remaining ties.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    arr = validate_mask(mask, num_classes)
    components = []
    for class_id in np.unique(arr):
        if class_id == IGNORE_INDEX:
            continue
        labels, n = ndimage.label(arr == class_id, structure=_STRUCTURES[connectivity])
        if n == 0:
            continue
        # raster-ordered coordinates grouped by label
        flat = labels.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=n + 1)
        rows, cols = np.divmod(order, arr.shape[1])
        coords = np.stack([rows, cols], axis=1)
        start = counts[0]
        for lab in range(1, n + 1):
            stop = start + counts[lab]
            components.append(Component(int(class_id), coords[start:stop]))
            start = stop
    components.sort(key=lambda c: (c.class_id, *c.bbox[:2], *c.pixels[0].tolist()))
    return components


def centroid_of(component: Component) -> tuple[float, float]:
    """Arithmetic mean ``(row, col)`` of the component's pixels."""
    n = component.area
    if n < 1:
        raise ValueError("centroid of an empty component is undefined")
    # integer sums keep the mean a single correctly-rounded division
    rsum, csum = (int(v) for v in component.pixels.sum(axis=0, dtype=np.int64))
    return rsum / n, csum / n


@dataclass(frozen=True)
class Centroid:
    sample_id: str
    class_id: int
    row: float
    col: float
    area: int


@dataclass(frozen=True)
class CentroidIndex:
    """Per-class catalogue of instance centroids for one label source."""

    classes: dict[int, tuple[Centroid, ...]] = field(default_factory=dict)
    provenance: str = "real"
    num_samples: int = 0

    def __post_init__(self):
        if self.provenance not in ("real", "pseudo"):
            raise ValueError(f"provenance must be 'real' or 'pseudo', got {self.provenance!r}")
        for class_id, entries in self.classes.items():
            if not entries:
                raise ValueError(f"class {class_id} has an empty centroid list")

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def __len__(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def is_empty(self) -> bool:
        return not self.classes

    def sample_ids(self) -> list[str]:
        return sorted({c.sample_id for v in self.classes.values() for c in v})

    def restrict(self, sample_ids: Iterable[str]) -> CentroidIndex:
        """Sub-index keeping only centroids of the given samples."""
        keep = set(sample_ids)
        classes = {}
        for class_id in self.class_ids:
            entries = tuple(c for c in self.classes[class_id] if c.sample_id in keep)
            if entries:
                classes[class_id] = entries
        return CentroidIndex(classes, self.provenance, len(keep))

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "provenance": self.provenance,
            "num_samples": self.num_samples,
            "classes": {
                str(k): [
                    {"sample_id": c.sample_id, "row": c.row, "col": c.col, "area": c.area}
                    for c in self.classes[k]
                ]
                for k in self.class_ids
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> CentroidIndex:
        if not isinstance(doc, dict):
            raise IndexFormatError("index document must be a mapping")
        if doc.get("version") != INDEX_VERSION:
            raise IndexFormatError(
                f"unsupported index version {doc.get('version')!r} (expected {INDEX_VERSION})"
            )
        try:
            classes = {}
            for key, entries in doc["classes"].items():
                class_id = int(key)
                classes[class_id] = tuple(
                    Centroid(str(e["sample_id"]), class_id, float(e["row"]), float(e["col"]), int(e["area"]))
                    for e in entries
                )
            return cls(dict(sorted(classes.items())), doc["provenance"], int(doc["num_samples"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise IndexFormatError(f"malformed index document: {exc}") from exc


def _mask_centroids(sample_id, mask, min_area, connectivity, num_classes, per_image):
    arr = validate_mask(mask, num_classes)
    out = []
    if per_image:
        for class_id in np.unique(arr):
            if class_id == IGNORE_INDEX:
                continue
            coords = np.argwhere(arr == class_id)
            comp = Component(int(class_id), coords)
            if comp.area >= min_area:
                row, col = centroid_of(comp)
                out.append(Centroid(sample_id, comp.class_id, row, col, comp.area))
        return out
    for comp in connected_components(arr, connectivity):
        if comp.area >= min_area:
            row, col = centroid_of(comp)
            out.append(Centroid(sample_id, comp.class_id, row, col, comp.area))
    return out


def build_centroid_index(
    dataset: Iterable[tuple[str, np.ndarray]],
    provenance: str = "real",
    min_area: int = 1,
    connectivity: int = 4,
    num_classes: int | None = None,
    per_image: bool = False,
    workers: int = 1,
) -> CentroidIndex:
    """Index the centroid of every component with ``area >= min_area``.

    Args:
        dataset: ``(sample_id, mask)`` pairs; ids must be unique.
        provenance: ``"real"`` or ``"pseudo"``.
        min_area: minimum component area in pixels.
        per_image: index one centroid per (image, class) pair instead of
            one per connected component.
        workers: thread fan-out across masks. The merged result is sorted,
            so it does not depend on this value.
    """
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    items = list(dataset)
    seen = set()
    for sample_id, _ in items:
        if sample_id in seen:
            raise ValueError(f"duplicate sample_id {sample_id!r}")
        seen.add(sample_id)

    def work(item):
        sid, mask = item
        return _mask_centroids(str(sid), mask, min_area, connectivity, num_classes, per_image)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]

    per_class: dict[int, list[Centroid]] = {}
    for found in results:
        for c in found:
            per_class.setdefault(c.class_id, []).append(c)
    classes = {
        k: tuple(sorted(v, key=lambda c: (c.sample_id, c.row, c.col)))
        for k, v in sorted(per_class.items())
    }
    return CentroidIndex(classes, provenance, len(items))


def dumps_index(index: CentroidIndex) -> str:
    return json.dumps(index.to_dict(), indent=1) + "\n"


def save_index(index: CentroidIndex, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_index(index))
    os.replace(tmp, path)


def load_index(path) -> CentroidIndex:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IndexFormatError(f"{path}: not a valid index document ({exc})") from exc
    return CentroidIndex.from_dict(doc)
