"""Restoration quality metrics.

PSNR and SSIM are computed on RGB in [0, 1]; the color error is computed in
CIE LAB.  Every metric takes an optional boolean region mask so shadow (S),
non-shadow (NS), and whole-image (ALL) numbers come from the same code
path.  ``evaluate`` reproduces the common benchmark protocol: resize to
256x256, then report all three metrics for all three regions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import torch

from .colorspace import RgbImage, to_lab
from .errors import ValidationError

PSNR_CAP = 99.0  # reported for identical inputs; keeps scores finite and sortable

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


def _as_array(img) -> np.ndarray:
    if isinstance(img, RgbImage):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")


def _region_selector(shape_hw: tuple[int, int], mask) -> np.ndarray:
    """Normalize an optional mask into a boolean HxW selector."""
    if mask is None:
        return np.ones(shape_hw, dtype=bool)
    sel = np.asarray(mask)
    if sel.shape != shape_hw:
        raise ValidationError(
            f"mask shape {sel.shape} does not match image shape {shape_hw}"
        )
    sel = sel.astype(bool)
    if not sel.any():
        raise ValidationError("region mask selects no pixels")
    return sel


def mse(a, b, region_mask=None) -> float:
    """Mean squared error over the selected pixels (all channels)."""
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    sel = _region_selector(a.shape[:2], region_mask)
    diff = (a - b)[sel]
    return float(np.mean(np.square(diff)))


def psnr(a, b, region_mask=None) -> float:
    """Peak signal-to-noise ratio in dB for data range 1.0.

    Identical inputs return the cap 99.0 rather than infinity; values above
    the cap are clipped to it so sorting stays consistent.
    """
    err = mse(a, b, region_mask)
    if err == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP))


def _gaussian_kernel_1d() -> np.ndarray:
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * _SSIM_SIGMA**2))
    return k / k.sum()


def _windowed_mean(plane: np.ndarray) -> np.ndarray:
    """11x11 Gaussian-weighted local mean, symmetric boundary."""
    k = _gaussian_kernel_1d()
    out = scipy.ndimage.correlate1d(plane, k, axis=0, mode="reflect")
    return scipy.ndimage.correlate1d(out, k, axis=1, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM for a single channel (window centered at each pixel)."""
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_a = _windowed_mean(a)
    mu_b = _windowed_mean(b)
    var_a = _windowed_mean(a * a) - mu_a * mu_a
    var_b = _windowed_mean(b * b) - mu_b * mu_b
    cov = _windowed_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, region_mask=None) -> float:
    """Single-scale SSIM averaged over channels, then over masked pixels."""
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    sel = _region_selector(a.shape[:2], region_mask)
    if a.ndim == 2:
        smap = ssim_map(a, b)
    else:
        smap = np.mean(
            [ssim_map(a[..., c], b[..., c]) for c in range(a.shape[2])], axis=0
        )
    return float(smap[sel].mean())


def rmse_lab(a, b, region_mask=None, true_rms: bool = False) -> float:
    """Color error in CIE LAB over the selected pixels.

    The default follows the convention of the shadow-removal benchmarks:
    despite the name, the reported number is the mean absolute LAB
    difference (averaged over the L, a, b channels and the masked pixels).
    ``true_rms=True`` computes an actual root-mean-square instead.
    """
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValidationError("rmse_lab requires HxWx3 RGB inputs")
    sel = _region_selector(a.shape[:2], region_mask)
    lab_a = to_lab(RgbImage(np.clip(a, 0.0, 1.0)))
    lab_b = to_lab(RgbImage(np.clip(b, 0.0, 1.0)))
    diff = np.stack(
        [lab_a.L - lab_b.L, lab_a.a - lab_b.a, lab_a.b - lab_b.b], axis=-1
    )[sel]
    if true_rms:
        return float(np.sqrt(np.mean(np.square(diff))))
    return float(np.mean(np.abs(diff)))


# --- benchmark-style evaluation ------------------------------------------

EVAL_SIZE = 256


@dataclass(frozen=True)
class RegionMetrics:
    psnr: float
    ssim: float
    rmse_lab: float
    pixels: int


@dataclass(frozen=True)
class RegionReport:
    """Metrics for the shadow region (s), non-shadow region (ns), and whole
    image (all).  A region that contains no pixels reports ``None``."""

    s: RegionMetrics | None
    ns: RegionMetrics | None
    all: RegionMetrics

    def to_dict(self) -> dict:
        def enc(m):
            return None if m is None else {
                "psnr": m.psnr, "ssim": m.ssim,
                "rmse_lab": m.rmse_lab, "pixels": m.pixels,
            }

        return {"S": enc(self.s), "NS": enc(self.ns), "ALL": enc(self.all)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"{'region':<8}{'pixels':>8}{'psnr':>9}{'ssim':>8}{'rmse_lab':>10}"]
        for name, m in (("S", self.s), ("NS", self.ns), ("ALL", self.all)):
            if m is None:
                lines.append(f"{name:<8}{0:>8}{'-':>9}{'-':>8}{'-':>10}")
            else:
                lines.append(
                    f"{name:<8}{m.pixels:>8}{m.psnr:>9.2f}{m.ssim:>8.4f}"
                    f"{m.rmse_lab:>10.3f}"
                )
        return "\n".join(lines)


def resize_for_eval(img: np.ndarray, size: int = EVAL_SIZE) -> np.ndarray:
    """Bilinear resize of an HxWxC (or HxW) image to size x size."""
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    t = torch.from_numpy(arr).permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(
        t, size=(size, size), mode="bilinear", align_corners=False
    )
    res = out[0].permute(1, 2, 0).numpy()
    return res[..., 0] if squeeze else res


def resize_mask_for_eval(mask: np.ndarray, size: int = EVAL_SIZE) -> np.ndarray:
    """Nearest-neighbor resize of a mask, re-binarized with a 0.5 threshold."""
    arr = np.asarray(mask, dtype=np.float64)
    t = torch.from_numpy(arr)[None, None]
    out = torch.nn.functional.interpolate(t, size=(size, size), mode="nearest")
    return out[0, 0].numpy() > 0.5


def _region_metrics(pred, gt, sel) -> RegionMetrics | None:
    if not sel.any():
        return None
    return RegionMetrics(
        psnr=psnr(pred, gt, sel),
        ssim=ssim(pred, gt, sel),
        rmse_lab=rmse_lab(pred, gt, sel),
        pixels=int(sel.sum()),
    )


def evaluate(pred, gt, mask, resize: bool = True) -> RegionReport:
    """Region report at the benchmark's 256x256 evaluation size.

    ``pred``/``gt`` are resized bilinearly, the mask with nearest neighbor;
    pass ``resize=False`` to evaluate at the native resolution instead.
    """
    pred, gt = _as_array(pred), _as_array(gt)
    _check_pair(pred, gt)
    m = np.asarray(mask)
    if m.shape != pred.shape[:2]:
        raise ValidationError(
            f"mask shape {m.shape} does not match image shape {pred.shape[:2]}"
        )
    if resize:
        pred = np.clip(resize_for_eval(pred), 0.0, 1.0)
        gt = np.clip(resize_for_eval(gt), 0.0, 1.0)
        sel = resize_mask_for_eval(m)
    else:
        sel = m.astype(bool)
    return RegionReport(
        s=_region_metrics(pred, gt, sel),
        ns=_region_metrics(pred, gt, ~sel),
        all=_region_metrics(pred, gt, np.ones_like(sel)),
    )
