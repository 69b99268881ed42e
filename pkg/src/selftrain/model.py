"""Small fully-convolutional encoder-decoder used as teacher and student."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

# width: stem channels; stride: total downsampling; context: dilated blocks at
# the lowest resolution.
PRESETS = {
    "tiny": {"width": 12, "stride": 2, "context": 2},
    "small": {"width": 16, "stride": 4, "context": 2},
    "medium": {"width": 24, "stride": 4, "context": 3},
}


def _conv_bn(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    """Per-pixel classifier returning ``N x C x H x W`` scores.

    Inputs must have spatial sizes divisible by ``stride``. The decoder
    upsamples the context features back to full resolution and fuses them
    with the stem features before the 1x1 classification ``head``.
    """

    def __init__(self, arch_preset: str = "tiny", num_classes: int = 6, in_channels: int = 3, tag: str = ""):
        super().__init__()
        if arch_preset not in PRESETS:
            raise ValueError(f"unknown arch preset {arch_preset!r}; choose from {sorted(PRESETS)}")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        cfg = PRESETS[arch_preset]
        w = cfg["width"]
        self.arch_preset = arch_preset
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.stride = cfg["stride"]
        self.tag = tag or arch_preset

        self.stem = _conv_bn(in_channels, w)
        down = []
        c = w
        for _ in range(int(np.log2(self.stride))):
            down.append(_conv_bn(c, 2 * c, stride=2))
            c *= 2
        self.down = nn.Sequential(*down)
        self.context = nn.Sequential(*[_conv_bn(c, c, dilation=2 ** (i + 1)) for i in range(cfg["context"])])
        self.fuse = _conv_bn(c + w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        low = self.stem(x)
        deep = self.context(self.down(low))
        deep = F.interpolate(deep, size=low.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(self.fuse(torch.cat([low, deep], dim=1)))

    def replace_head(self, num_classes: int, seed: int = 0) -> None:
        """Swap in a freshly initialised head for a new label space."""
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.head = nn.Conv2d(self.head.in_channels, num_classes, 1)
        finally:
            torch.random.set_rng_state(gen_state)
        self.num_classes = num_classes


def build_model(arch_preset: str, num_classes: int, seed: int, tag: str = "") -> SegModel:
    """Construct a model whose initial weights depend only on ``seed``."""
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SegModel(arch_preset, num_classes, tag=tag)
    finally:
        torch.random.set_rng_state(state)
    return model


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``N x H x W x 3`` (or a single ``H x W x 3``) float/uint8 array to ``N x 3 x H x W``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))


@torch.no_grad()
def predict_proba(model: SegModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax class probabilities, ``N x H x W x C`` float32."""
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != model.in_channels:
        raise ValueError(f"expected N x H x W x {model.in_channels} images, got shape {np.shape(images)}")
    h, w = arr.shape[1:3]
    if h % model.stride or w % model.stride:
        raise ValueError(f"image size {h}x{w} not divisible by model stride {model.stride}")
    was_training = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(arr), batch_size):
            scores = model(to_tensor(arr[i:i + batch_size]))
            out.append(torch.softmax(scores, dim=1).permute(0, 2, 3, 1).numpy())
    finally:
        model.train(was_training)
    probs = np.concatenate(out)
    return probs[0] if single else probs


def predict(model: SegModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard argmax mask and per-pixel max probability for one ``H x W x 3`` image."""
    probs = predict_proba(model, image)
    return probs.argmax(axis=-1).astype(np.uint8), probs.max(axis=-1)


def config_digest(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(model: SegModel, path, config: dict | None = None) -> None:
    torch.save({
        "arch_preset": model.arch_preset,
        "num_classes": model.num_classes,
        "tag": model.tag,
        "config_digest": config_digest(config or {}),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path) -> tuple[SegModel, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    model = SegModel(ckpt["arch_preset"], ckpt["num_classes"], tag=ckpt["tag"])
    model.load_state_dict(ckpt["state_dict"])
    return model, {k: v for k, v in ckpt.items() if k != "state_dict"}
