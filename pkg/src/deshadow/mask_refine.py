"""Shadow-mask refinement network.

Hand-drawn or detector-produced masks are often a few pixels off, and the
removal networks are sensitive to that.  This module cleans a dirty mask
with a small U-net that sees the RGB image alongside the mask: a plain
convolutional encoder-decoder over the 4-channel stack (RGB + mask), plus
an auxiliary encoder over the RGB alone whose feature pyramid is fed into
the decoder, so image edges can pull the mask boundary into place.

Training data comes from synthetic corruptions of known-good masks
(dilation, erosion, punched-out rectangles — ``corrupt_mask``).  The
output is a sigmoid probability map at input resolution; it is passed on
soft by default, and thresholded at 0.5 only when reporting IoU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .colorspace import RgbImage
from .crnet import ColorEncoder
from .errors import ValidationError
from .lrnet import Downsample, Upsample, _pad_input


@dataclass(frozen=True)
class MaskRefineConfig:
    base_dim: int = 16

    def __post_init__(self):
        if self.base_dim < 1:
            raise ValidationError("base_dim must be >= 1")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.base_dim * 2**k for k in range(4))

    @property
    def pad_multiple(self) -> int:
        return 8


class ConvBlock(nn.Module):
    """Two 3x3 reflect-padded convolutions with GELU."""

    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect"),
            nn.GELU(),
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect"),
            nn.GELU(),
        )

    def forward(self, x):
        return self.body(x)


class MaskRefineNet(nn.Module):
    """U-net over (RGB + dirty mask) with an RGB-only side encoder.

    The side encoder's pyramid is concatenated into the bottleneck and
    into every decoder stage.  The head starts near zero so the initial
    probability map sits around 0.5 (unsaturated sigmoid).
    """

    def __init__(self, cfg: MaskRefineConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MaskRefineConfig()
        dims = cfg.dims

        self.embed = nn.Conv2d(4, dims[0], 3, padding=1, padding_mode="reflect")
        self.aux = ColorEncoder(dims, in_channels=3)

        self.enc = nn.ModuleList(ConvBlock(d) for d in dims[:3])
        self.downs = nn.ModuleList(Downsample(d) for d in dims[:3])

        self.bottleneck_fuse = nn.Conv2d(2 * dims[3], dims[3], 1)
        self.bottleneck = ConvBlock(dims[3])

        self.ups = nn.ModuleList(Upsample(dims[k + 1]) for k in reversed(range(3)))
        self.fuses = nn.ModuleList(
            nn.Conv2d(3 * dims[k], dims[k], 1) for k in reversed(range(3))
        )
        self.dec = nn.ModuleList(ConvBlock(dims[k]) for k in reversed(range(3)))

        self.head = nn.Conv2d(dims[0], 1, 3, padding=1, padding_mode="reflect")
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)

    def forward(self, rgb: torch.Tensor, dirty: torch.Tensor) -> torch.Tensor:
        if rgb.shape[-2:] != dirty.shape[-2:]:
            raise ValidationError(
                f"image {tuple(rgb.shape[-2:])} and mask {tuple(dirty.shape[-2:])} "
                "sizes differ"
            )
        rgb, (h, w) = _pad_input(rgb, self.cfg.pad_multiple)
        dirty, _ = _pad_input(dirty, self.cfg.pad_multiple)

        aux = self.aux(rgb)
        x = self.embed(torch.cat([rgb, dirty], dim=1))

        skips = []
        for block, down in zip(self.enc, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)

        x = self.bottleneck_fuse(torch.cat([x, aux[3]], dim=1))
        x = self.bottleneck(x)

        for k, (up, fuse, block) in enumerate(zip(self.ups, self.fuses, self.dec)):
            stage = 2 - k
            x = up(x)
            x = fuse(torch.cat([x, skips[stage], aux[stage]], dim=1))
            x = block(x)

        logits = self.head(x)
        return torch.sigmoid(logits)[..., :h, :w]


def refine_mask(
    img: RgbImage | np.ndarray, dirty: np.ndarray, net: MaskRefineNet
) -> np.ndarray:
    """Run the refinement network on one image/mask pair.

    Returns a float probability map with the dirty mask's shape.
    """
    pixels = img.data if isinstance(img, RgbImage) else np.asarray(img)
    dirty = np.asarray(dirty, dtype=np.float32)
    if pixels.shape[:2] != dirty.shape:
        raise ValidationError(
            f"image {pixels.shape[:2]} and mask {dirty.shape} sizes differ"
        )
    rgb_t = torch.from_numpy(
        np.ascontiguousarray(pixels, dtype=np.float32)
    ).permute(2, 0, 1)[None]
    dirty_t = torch.from_numpy(dirty)[None, None]
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            prob = net(rgb_t, dirty_t)
    finally:
        net.train(was_training)
    return prob[0, 0].numpy().astype(np.float64)


BCE_EPS = 1e-7


def mask_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy plus soft Dice, equally weighted.

    ``pred`` holds probabilities in [0,1]; clamping at 1e-7 keeps the
    BCE finite at exact 0/1.  Both terms vanish when pred == gt on a
    binary target, and the Dice term reaches 1 when pred == 1-gt.
    """
    if pred.shape != gt.shape:
        raise ValidationError(f"pred {tuple(pred.shape)} != gt {tuple(gt.shape)}")
    bce = -(
        gt * pred.clamp_min(BCE_EPS).log()
        + (1.0 - gt) * (1.0 - pred).clamp_min(BCE_EPS).log()
    ).mean()

    batch = pred.shape[0] if pred.dim() == 4 else 1
    pf = pred.reshape(batch, -1)
    gf = gt.reshape(batch, -1)
    inter = (pf * gf).sum(dim=1)
    total = pf.sum(dim=1) + gf.sum(dim=1)
    dice = 1.0 - (2.0 * inter + BCE_EPS) / (total + BCE_EPS)
    return bce + dice.mean()


def corrupt_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Damage a clean binary mask the way real annotations go wrong.

    One morphological hit (dilation or erosion, 1-5 px) followed by up to
    3 rectangular holes.  Deterministic under a seeded generator.
    """
    binary = np.asarray(mask) > 0.5
    h, w = binary.shape
    radius = int(rng.integers(1, 6))
    if rng.integers(0, 2) == 0:
        binary = ndimage.binary_dilation(binary, iterations=radius)
    else:
        binary = ndimage.binary_erosion(binary, iterations=radius)
    binary = binary.copy()
    for _ in range(int(rng.integers(0, 4))):
        hh = int(rng.integers(max(2, h // 8), max(3, h // 3)))
        ww = int(rng.integers(max(2, w // 8), max(3, w // 3)))
        y = int(rng.integers(0, max(1, h - hh)))
        x = int(rng.integers(0, max(1, w - ww)))
        binary[y : y + hh, x : x + ww] = False
    return binary.astype(np.float32)


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of the thresholded masks.

    Two empty masks agree perfectly (IoU 1).
    """
    a = np.asarray(pred) > threshold
    b = np.asarray(gt) > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
