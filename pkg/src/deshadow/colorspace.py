"""Color plane decoupling and CIE LAB conversion.

The pipeline's invertible split sends an RGB image to a luminance plane
(carrying brightness and texture) and two chroma planes (carrying the
blue/red offsets where shadow color casts concentrate).  The transform is
BT.601 full-range:

    Y  = 0.299 R + 0.587 G + 0.114 B
    Cb = (B - Y) / 1.772 + 0.5
    Cr = (R - Y) / 1.402 + 0.5

with all planes kept in [0, 1] and neutral chroma at 0.5.  The inverse is
exact in real arithmetic; both directions clamp to [0, 1] so that slightly
out-of-range network outputs stay representable.

LAB conversion (sRGB primaries, D65 white) backs the color-error metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError

# BT.601 luma weights and full-range chroma scale factors (2*(1-Kb), 2*(1-Kr))
_KR, _KG, _KB = 0.299, 0.587, 0.114
_CB_SCALE = 1.772
_CR_SCALE = 1.402

# sRGB -> CIE XYZ (D65), IEC 61966-2-1 coefficients
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def _require_finite(name: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{name} contains non-finite values")


def _require_unit_range(name: str, data: np.ndarray) -> None:
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValidationError(
            f"{name} values must lie in [0, 1], got range "
            f"[{data.min():.6g}, {data.max():.6g}]"
        )


@dataclass(frozen=True)
class RgbImage:
    """H x W x 3 image, channel order R,G,B, values in [0, 1]."""

    data: NDArray[np.float64]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"RgbImage expects HxWx3 data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("RgbImage must have H >= 1 and W >= 1")
        _require_finite("RgbImage", arr)
        _require_unit_range("RgbImage", arr)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LumaPlane:
    """H x W luminance plane in [0, 1]."""

    data: NDArray[np.float64]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"LumaPlane expects HxW data, got shape {arr.shape}")
        _require_finite("LumaPlane", arr)
        _require_unit_range("LumaPlane", arr)
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class ChromaPlanes:
    """Cb/Cr offset planes in [0, 1] with neutral value 0.5."""

    cb: NDArray[np.float64]
    cr: NDArray[np.float64]

    def __post_init__(self):
        cb = np.asarray(self.cb, dtype=np.float64)
        cr = np.asarray(self.cr, dtype=np.float64)
        if cb.ndim != 2 or cb.shape != cr.shape:
            raise ValidationError(
                f"ChromaPlanes expects matching HxW planes, got {cb.shape} and {cr.shape}"
            )
        _require_finite("ChromaPlanes.cb", cb)
        _require_finite("ChromaPlanes.cr", cr)
        _require_unit_range("ChromaPlanes.cb", cb)
        _require_unit_range("ChromaPlanes.cr", cr)
        object.__setattr__(self, "cb", cb)
        object.__setattr__(self, "cr", cr)


@dataclass(frozen=True)
class LabImage:
    """CIE L*a*b* planes: L in [0, 100], a/b unbounded reals."""

    L: NDArray[np.float64]
    a: NDArray[np.float64]
    b: NDArray[np.float64]

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if not (L.shape == a.shape == b.shape) or L.ndim != 2:
            raise ValidationError("LabImage planes must share an HxW shape")
        for name, arr in (("L", L), ("a", a), ("b", b)):
            _require_finite(f"LabImage.{name}", arr)
        if L.size and (L.min() < 0.0 or L.max() > 100.0):
            raise ValidationError("LabImage.L must lie in [0, 100]")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def decouple(img: RgbImage) -> tuple[LumaPlane, ChromaPlanes]:
    """Split an RGB image into luminance and chroma planes."""
    r, g, b = img.data[..., 0], img.data[..., 1], img.data[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / _CB_SCALE + 0.5
    cr = (r - y) / _CR_SCALE + 0.5
    return (
        LumaPlane(np.clip(y, 0.0, 1.0)),
        ChromaPlanes(np.clip(cb, 0.0, 1.0), np.clip(cr, 0.0, 1.0)),
    )


def recouple(luma: LumaPlane, chroma: ChromaPlanes) -> RgbImage:
    """Invert :func:`decouple`; the result is clamped to [0, 1]."""
    if luma.data.shape != chroma.cb.shape:
        raise ValidationError(
            f"luma shape {luma.data.shape} does not match chroma shape {chroma.cb.shape}"
        )
    y = luma.data
    b = y + _CB_SCALE * (chroma.cb - 0.5)
    r = y + _CR_SCALE * (chroma.cr - 0.5)
    g = (y - _KR * r - _KB * b) / _KG
    rgb = np.stack([r, g, b], axis=-1)
    return RgbImage(np.clip(rgb, 0.0, 1.0))


def _srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3.0 * delta**2) + 4.0 / 29.0)


def to_lab(img: RgbImage) -> LabImage:
    """Convert sRGB to CIE L*a*b* (D65 white point)."""
    linear = _srgb_to_linear(img.data)
    xyz = linear @ _SRGB_TO_XYZ.T
    fx, fy, fz = (_lab_f(xyz[..., i] / _D65_WHITE[i]) for i in range(3))
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    # in-gamut inputs can exceed 100 by float fuzz only
    return LabImage(np.clip(L, 0.0, 100.0), a, b)


# --- tensor-side variants -------------------------------------------------
#
# Training losses computed on RGB after recoupling need the same transform
# inside the autograd graph.  These mirror decouple/recouple for NCHW
# tensors; test_colorspace pins them to the array implementations.

def decouple_tensor(rgb):
    """(B,3,H,W) tensor -> luma (B,1,H,W), chroma (B,2,H,W) with Cb,Cr order."""
    import torch

    r, g, b = rgb[:, 0:1], rgb[:, 1:2], rgb[:, 2:3]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / _CB_SCALE + 0.5
    cr = (r - y) / _CR_SCALE + 0.5
    return y.clamp(0.0, 1.0), torch.cat([cb, cr], dim=1).clamp(0.0, 1.0)


def recouple_tensor(luma, chroma):
    """luma (B,1,H,W) + chroma (B,2,H,W) -> RGB (B,3,H,W), clamped to [0, 1]."""
    import torch

    y = luma
    cb, cr = chroma[:, 0:1], chroma[:, 1:2]
    b = y + _CB_SCALE * (cb - 0.5)
    r = y + _CR_SCALE * (cr - 0.5)
    g = (y - _KR * r - _KB * b) / _KG
    return torch.cat([r, g, b], dim=1).clamp(0.0, 1.0)
