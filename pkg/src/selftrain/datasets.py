"""In-memory segmentation datasets and their on-disk PNG layout.

Layout: ``<root>/images/<id>.png`` (8-bit RGB), ``<root>/masks/<id>.png``
(8-bit single channel, ignore=255) and ``<root>/manifest.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class MissingArtifactError(FileNotFoundError):
    pass


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, optimize=False)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)


@dataclass
class SegDataset:
    """Images (uint8 ``H x W x 3``) and masks keyed by string sample id."""

    images: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    num_classes: int = 0
    name: str = ""

    @property
    def ids(self) -> list[str]:
        return sorted(self.images)

    def __len__(self):
        return len(self.images)

    def subset(self, ids) -> SegDataset:
        ids = list(ids)
        return SegDataset({i: self.images[i] for i in ids},
                          {i: self.masks[i] for i in ids if i in self.masks},
                          self.num_classes, self.name)

    def stacked_images(self, ids=None) -> np.ndarray:
        return np.stack([self.images[i] for i in (ids or self.ids)])

    def labeled_pairs(self):
        return [(i, self.masks[i]) for i in self.ids]


def load_dataset(root) -> SegDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    images, masks = {}, {}
    for sid in manifest["ids"]:
        images[sid] = read_image(root / "images" / f"{sid}.png")
        mpath = root / "masks" / f"{sid}.png"
        if mpath.exists():
            masks[sid] = read_mask(mpath)
    return SegDataset(images, masks, len(manifest["classes"]), manifest.get("name", root.name))
