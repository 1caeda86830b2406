"""Physical shadow formation model and synthetic dataset generator.

A scene is described by per-channel albedo ``A``, direct shading ``S_d``,
ambient shading ``S_a``, a spatially varying ambient attenuation ``a`` in
[0, 1], and a binary shadow mask.  Lit pixels observe ``(S_d + S_a) * A``;
occluded pixels lose the direct term and keep an attenuated ambient term,
``a * S_a * A``.  Camera degradation is modeled as blur, then sensor
noise, then quantization.

The same machinery powers a Retinex-based analysis of the color bias that
shadows introduce: ambient light is typically sky-tinted, so reflectance
estimates inside shadow regions drift toward blue relative to the lit
ground truth.  ``color_bias_analysis`` measures that drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage
from numpy.typing import NDArray

from .colorspace import RgbImage
from .data_io import save_image, save_mask
from .errors import ValidationError

RETINEX_EPS = 1e-3


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Channel-wise Gaussian blur with symmetric boundary; no-op at sigma 0."""
    if sigma <= 0:
        return arr
    sigmas = (sigma, sigma) + (0,) * (arr.ndim - 2)
    return scipy.ndimage.gaussian_filter(arr, sigma=sigmas, mode="reflect")


@dataclass(frozen=True)
class Scene:
    """Channel-resolved scene description (spectra pre-integrated to RGB)."""

    albedo: NDArray[np.float64]          # HxWx3 in [0,1]
    direct_shading: NDArray[np.float64]  # HxWx3 >= 0
    ambient_shading: NDArray[np.float64] # HxWx3 >= 0
    attenuation: NDArray[np.float64]     # HxW in [0,1]
    shadow_mask: NDArray[np.float64]     # HxW, values {0,1}

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        sd = np.asarray(self.direct_shading, dtype=np.float64)
        sa = np.asarray(self.ambient_shading, dtype=np.float64)
        att = np.asarray(self.attenuation, dtype=np.float64)
        mask = np.asarray(self.shadow_mask, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValidationError(f"albedo must be HxWx3, got {a.shape}")
        hw = a.shape[:2]
        for name, arr, shape in (
            ("direct_shading", sd, a.shape),
            ("ambient_shading", sa, a.shape),
            ("attenuation", att, hw),
            ("shadow_mask", mask, hw),
        ):
            if arr.shape != shape:
                raise ValidationError(f"{name} shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        if a.min() < 0 or a.max() > 1:
            raise ValidationError("albedo must lie in [0,1]")
        if sd.min() < 0 or sa.min() < 0:
            raise ValidationError("shadings must be non-negative")
        if att.min() < 0 or att.max() > 1:
            raise ValidationError("attenuation must lie in [0,1]")
        if not np.all(np.isin(mask, (0.0, 1.0))):
            raise ValidationError("shadow_mask must be binary")
        for field, arr in (
            ("albedo", a), ("direct_shading", sd), ("ambient_shading", sa),
            ("attenuation", att), ("shadow_mask", mask),
        ):
            object.__setattr__(self, field, arr)


@dataclass(frozen=True)
class DegradationConfig:
    """Camera degradation: blur -> additive Gaussian noise -> quantization."""

    noise_std: float = 0.01
    quant_bits: int = 8
    blur_radius: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if not 1 <= self.quant_bits <= 16:
            raise ValidationError("quant_bits must lie in [1,16]")
        if self.blur_radius < 0:
            raise ValidationError("blur_radius must be >= 0")


def render_lit(scene: Scene) -> RgbImage:
    """Shadow-free observation: (S_d + S_a) * A per pixel and channel."""
    img = (scene.direct_shading + scene.ambient_shading) * scene.albedo
    return RgbImage(np.clip(img, 0.0, 1.0))


def render_shadow(scene: Scene) -> RgbImage:
    """Observation with the direct light occluded inside the mask.

    Masked pixels see ``a * S_a * A``; unmasked pixels match render_lit.
    """
    lit = (scene.direct_shading + scene.ambient_shading) * scene.albedo
    occluded = scene.attenuation[..., None] * scene.ambient_shading * scene.albedo
    img = np.where(scene.shadow_mask[..., None] > 0.5, occluded, lit)
    return RgbImage(np.clip(img, 0.0, 1.0))


def apply_degradation(img: RgbImage, cfg: DegradationConfig) -> RgbImage:
    """Blur, noise, and quantize in that order; deterministic per seed."""
    out = _blur(img.data, cfg.blur_radius)
    if cfg.noise_std > 0:
        rng = np.random.default_rng(cfg.seed)
        out = out + rng.normal(0.0, cfg.noise_std, out.shape)
    levels = float(2**cfg.quant_bits - 1)
    out = np.round(np.clip(out, 0.0, 1.0) * levels) / levels
    return RgbImage(out)


@dataclass(frozen=True)
class RetinexPair:
    illumination: NDArray[np.float64]  # HxW in (0,1]
    reflectance: NDArray[np.float64]   # HxWx3 >= 0

    def __post_init__(self):
        if np.asarray(self.illumination).min() <= 0:
            raise ValidationError("illumination must be strictly positive")


def retinex_decompose(img: RgbImage, smoothing_sigma: float = 5.0) -> RetinexPair:
    """Illumination = smoothed max-channel (floored at 1e-3); R = I / L."""
    illum = _blur(img.data.max(axis=2), smoothing_sigma)
    illum = np.maximum(illum, RETINEX_EPS)
    return RetinexPair(illumination=illum, reflectance=img.data / illum[..., None])


@dataclass(frozen=True)
class BiasReport:
    """Per-channel reflectance-difference statistics inside shadow masks."""

    bin_edges: NDArray[np.float64]      # shared across channels, len bins+1
    counts: NDArray[np.int64]           # 3 x bins, channel order R,G,B
    mean: NDArray[np.float64]           # 3
    median: NDArray[np.float64]         # 3
    sample_count: int

    CHANNELS = ("R", "G", "B")

    def to_text(self) -> str:
        lines = ["channel\tbin_left\tbin_right\tcount"]
        for c, name in enumerate(self.CHANNELS):
            for b in range(self.counts.shape[1]):
                lines.append(
                    f"{name}\t{self.bin_edges[b]:.6g}\t{self.bin_edges[b + 1]:.6g}"
                    f"\t{self.counts[c, b]}"
                )
        lines.append(
            "# mean R/G/B: " + " ".join(f"{v:.6g}" for v in self.mean)
        )
        lines.append(
            "# median R/G/B: " + " ".join(f"{v:.6g}" for v in self.median)
        )
        lines.append(f"# samples: {self.sample_count}")
        return "\n".join(lines)

    def save_plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centers = 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])
        fig, ax = plt.subplots(figsize=(6, 4))
        for c, (name, color) in enumerate(zip(self.CHANNELS, "rgb")):
            ax.plot(centers, self.counts[c], color=color, label=name)
        ax.set_xlabel("reflectance difference (shadow - shadow-free)")
        ax.set_ylabel("pixel count")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)


def color_bias_analysis(pairs, bins: int = 64) -> BiasReport:
    """Histogram of per-channel reflectance differences in shadow regions.

    ``pairs`` iterates (shadow RgbImage, shadow-free RgbImage, mask); masks
    select the pixels that contribute.  Raises when no pixel is masked.
    """
    diffs = [[], [], []]
    for shadow, free, mask in pairs:
        if shadow.data.shape != free.data.shape:
            raise ValidationError("pair images must share a shape")
        sel = np.asarray(mask) > 0.5
        if sel.shape != shadow.data.shape[:2]:
            raise ValidationError("mask shape must match images")
        if not sel.any():
            continue
        r_shadow = retinex_decompose(shadow).reflectance
        r_free = retinex_decompose(free).reflectance
        d = (r_shadow - r_free)[sel]
        for c in range(3):
            diffs[c].append(d[:, c])
    if not diffs[0]:
        raise ValidationError("no samples: all masks are empty")
    channels = [np.concatenate(d) for d in diffs]
    lo = min(d.min() for d in channels)
    hi = max(d.max() for d in channels)
    if lo == hi:  # all-identical diffs still need a non-degenerate range
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.stack([np.histogram(d, bins=edges)[0] for d in channels])
    return BiasReport(
        bin_edges=edges,
        counts=counts,
        mean=np.array([d.mean() for d in channels]),
        median=np.array([np.median(d) for d in channels]),
        sample_count=int(channels[0].size),
    )


# --- randomized scenes and dataset generation ----------------------------

def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean smooth noise, rescaled to roughly unit spread."""
    field = _blur(rng.standard_normal(shape), sigma)
    scale = max(float(np.abs(field).max()), 1e-9)
    return field / scale


def _blob_mask(rng: np.random.Generator, h: int, w: int, area: float) -> np.ndarray:
    """Binary blob covering approximately ``area`` of the frame."""
    field = _blur(rng.standard_normal((h, w)), sigma=max(h, w) / 8.0)
    thresh = np.quantile(field, 1.0 - area)
    return (field > thresh).astype(np.float64)


def random_scene(rng: np.random.Generator, h: int, w: int) -> Scene:
    """Scene with smooth albedo, gentle shading gradients, blue-tinted
    ambient light, and a blob shadow with a blurred attenuation ramp."""
    albedo = 0.55 + 0.35 * _smooth_field(rng, (h, w, 3), sigma=max(h, w) / 10.0)
    albedo = np.clip(albedo, 0.05, 1.0)

    gradient = _smooth_field(rng, (h, w), sigma=max(h, w) / 4.0)[..., None]
    direct_level = rng.uniform(0.45, 0.75)
    direct = np.clip(direct_level * (1.0 + 0.2 * gradient), 0.0, None)
    direct = np.broadcast_to(direct, (h, w, 3)).copy()

    ambient_level = rng.uniform(0.2, 0.4)
    tint = np.array([
        rng.uniform(0.7, 0.9),   # R: ambient skylight is poor in red
        rng.uniform(0.85, 1.0),  # G
        rng.uniform(1.0, 1.25),  # B: and rich in blue
    ])
    ambient = np.clip(ambient_level * tint[None, None, :] * (1.0 + 0.1 * gradient), 0.0, None)
    ambient = np.ascontiguousarray(np.broadcast_to(ambient, (h, w, 3)))

    mask = _blob_mask(rng, h, w, area=rng.uniform(0.12, 0.4))
    a_core = rng.uniform(0.15, 0.6)
    attenuation = np.where(mask > 0.5, a_core, 1.0)
    attenuation = np.clip(_blur(attenuation, sigma=1.5), 0.0, 1.0)

    return Scene(
        albedo=albedo,
        direct_shading=direct,
        ambient_shading=ambient,
        attenuation=attenuation,
        shadow_mask=mask,
    )


def generate_dataset(
    out_root: str | Path,
    n: int,
    size: tuple[int, int],
    cfg: DegradationConfig | None = None,
    seed: int = 0,
) -> list[str]:
    """Render ``n`` (shadow, mask, gt) triplets into a dataset directory.

    Per-triplet seeds are spawned from ``seed``, so any prefix of the
    sequence is reproducible independently of ``n``.  Returns emitted ids.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    h, w = size
    if h < 8 or w < 8:
        raise ValidationError("size must be at least 8x8")
    cfg = cfg or DegradationConfig()
    out_root = Path(out_root)
    ids = []
    children = np.random.SeedSequence(seed).spawn(n)
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        scene = random_scene(rng, h, w)
        triplet_seed = int(rng.integers(0, 2**31 - 1))
        degraded = apply_degradation(
            render_shadow(scene),
            DegradationConfig(
                noise_std=cfg.noise_std,
                quant_bits=cfg.quant_bits,
                blur_radius=cfg.blur_radius,
                seed=triplet_seed,
            ),
        )
        name = f"syn_{k:04d}"
        save_image(out_root / "input" / f"{name}.png", degraded)
        save_image(out_root / "gt" / f"{name}.png", render_lit(scene))
        save_mask(out_root / "mask" / f"{name}.png", scene.shadow_mask)
        ids.append(name)
    return ids
