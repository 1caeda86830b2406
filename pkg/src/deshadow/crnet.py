"""Color regeneration network and the full removal pipeline.

CRNet restores the chroma planes given the already-restored luminance.  A
dedicated convolutional encoder turns the input chroma into a 4-level
feature pyramid; those color features enter the luminance-path U-net two
ways: as the context for the rectified outreach attention in the deep
stages, and as cross-attention *values* injected into every skip
connection (queries and keys come from the skip features, so structure
decides where color flows).  The head predicts a chroma residual:

    out = clamp(I_c + delta, 0, 1)

so a zero-initialized head passes the input chroma through unchanged.

``remove_shadow`` composes the whole pipeline: split an RGB image into
luminance and chroma, restore each, and recombine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_module
from .attention import (
    ChannelLayerNorm,
    OutreachRelativeBias,
    WindowGeometry,
    attention_map,
    merge_windows,
    pad_to_multiple,
    partition_windows,
)
from .colorspace import ChromaPlanes, LumaPlane, RgbImage, decouple, recouple
from .errors import ValidationError
from .lrnet import LrNet, _make_stage, _pad_input, _run_stage, Downsample, Upsample


@dataclass(frozen=True)
class CrNetConfig:
    base_dim: int = 32
    blocks_per_stage: int = 2
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    window: WindowGeometry = field(default_factory=WindowGeometry)
    roa_stages: tuple[int, ...] = (2, 3)
    mask_input: bool = True
    lambda_init: float = 0.7
    split_bias: bool = False
    init_head: str = "zero"
    injection_window: int = 4

    def __post_init__(self):
        if self.base_dim < 1 or self.blocks_per_stage < 1:
            raise ValidationError("base_dim and blocks_per_stage must be >= 1")
        if len(self.heads) != 4:
            raise ValidationError("heads must list one entry per stage (4)")
        if not set(self.roa_stages) <= {0, 1, 2, 3}:
            raise ValidationError("roa_stages must be a subset of {0,1,2,3}")
        if self.init_head not in ("zero", "random"):
            raise ValidationError("init_head must be 'zero' or 'random'")
        if self.injection_window < 1:
            raise ValidationError("injection_window must be >= 1")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.base_dim * 2**k for k in range(4))

    @property
    def pad_multiple(self) -> int:
        return max(self.window.window_size, self.injection_window) * 8


class ColorEncoder(nn.Module):
    """Four-stage convolutional pyramid over the chroma planes.

    Emits features at 1x, 1/2, 1/4, 1/8 resolution with the backbone's
    stage dims.  All convolutions use reflect padding, so a spatially
    constant input (neutral chroma) yields spatially constant features.
    A pretrained replacement can be imported via import_color_encoder.
    """

    def __init__(self, dims: tuple[int, ...], in_channels: int = 2):
        super().__init__()
        def conv(cin, cout, stride=1):
            return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")

        self.stem = conv(in_channels, dims[0])
        self.stages = nn.ModuleList(
            nn.Sequential(conv(d, d), nn.GELU(), conv(d, d), nn.GELU())
            for d in dims
        )
        self.downs = nn.ModuleList(
            conv(dims[k], dims[k + 1], stride=2) for k in range(len(dims) - 1)
        )

    def forward(self, chroma: torch.Tensor) -> list[torch.Tensor]:
        x = F.gelu(self.stem(chroma))
        features = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            features.append(x)
            if k < len(self.downs):
                x = self.downs[k](x)
        return features


class ColorInjection(nn.Module):
    """Window cross-attention that pulls color into a luminance-path skip.

    Queries and keys are projections of the (normalized) skip features;
    values are a bias-free projection of the color features; the attended
    color is added residually.  Zero color features therefore leave the
    skip exactly unchanged.
    """

    def __init__(self, dim: int, color_dim: int, heads: int, window_size: int = 4):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.window_size = window_size
        self.norm = ChannelLayerNorm(dim)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(color_dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)
        self.bias = OutreachRelativeBias(WindowGeometry(window_size, 0.0, 1), heads)

    def _split_heads(self, tokens: torch.Tensor) -> torch.Tensor:
        b, nwin, t, _ = tokens.shape
        return tokens.view(b, nwin, t, self.heads, self.head_dim).transpose(2, 3)

    def attention(self, skip: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
        """The row-stochastic attention map (batch, windows, heads, M^2, M^2)."""
        self._validate(skip, color)
        m = self.window_size
        skip_p, _ = pad_to_multiple(skip, m)
        normed = self.norm(skip_p)
        q = self._split_heads(self.w_q(partition_windows(normed, m)))
        k = self._split_heads(self.w_k(partition_windows(normed, m)))
        return attention_map(q, k, self.bias(), self.head_dim)

    def _validate(self, skip: torch.Tensor, color: torch.Tensor) -> None:
        if skip.ndim != 4 or color.ndim != 4:
            raise ValidationError("skip and color must be (B,C,H,W)")
        if skip.shape[0] != color.shape[0] or skip.shape[-2:] != color.shape[-2:]:
            raise ValidationError(
                f"skip {tuple(skip.shape)} and color {tuple(color.shape)} "
                "must align spatially"
            )

    def forward(self, skip: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
        self._validate(skip, color)
        b, c, h, w = skip.shape
        m = self.window_size
        skip_p, _ = pad_to_multiple(skip, m)
        color_p, _ = pad_to_multiple(color, m)
        hp, wp = skip_p.shape[-2:]
        att = self.attention(skip, color)
        v = self._split_heads(self.w_v(partition_windows(color_p, m)))
        out = (att @ v).transpose(2, 3).reshape(b, -1, m * m, c)
        out = merge_windows(self.proj(out), hp, wp)[..., :h, :w]
        return skip + out


class CrNet(nn.Module):
    """Color regeneration network; see the module docstring."""

    def __init__(self, cfg: CrNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CrNetConfig()
        dims = cfg.dims
        in_channels = 3 + (1 if cfg.mask_input else 0)  # luma + 2 chroma (+ mask)
        self.embed = nn.Conv2d(in_channels, dims[0], 3, padding=1, padding_mode="reflect")
        self.color_encoder = ColorEncoder(dims)

        lr_cfg = _as_lr_config(cfg)
        self.encoder = nn.ModuleList(_make_stage(lr_cfg, k) for k in range(3))
        self.downs = nn.ModuleList(Downsample(dims[k]) for k in range(3))
        self.bottleneck = _make_stage(lr_cfg, 3)
        self.inject = nn.ModuleList(
            ColorInjection(dims[k], dims[k], cfg.heads[k], cfg.injection_window)
            for k in range(4)
        )
        self.ups = nn.ModuleList(Upsample(dims[k + 1]) for k in reversed(range(3)))
        self.fuses = nn.ModuleList(
            nn.Conv2d(dims[k] * 2, dims[k], 1) for k in reversed(range(3))
        )
        self.decoder = nn.ModuleList(_make_stage(lr_cfg, k) for k in reversed(range(3)))
        self.head = nn.Conv2d(dims[0], 2, 3, padding=1, padding_mode="reflect")
        if cfg.init_head == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(
        self,
        luma_hat: torch.Tensor,
        chroma: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if luma_hat.ndim != 4 or luma_hat.shape[1] != 1:
            raise ValidationError(f"luma_hat must be (B,1,H,W), got {tuple(luma_hat.shape)}")
        if chroma.shape != (luma_hat.shape[0], 2, *luma_hat.shape[-2:]):
            raise ValidationError(
                f"chroma shape {tuple(chroma.shape)} does not match luma "
                f"{tuple(luma_hat.shape)}"
            )
        if self.cfg.mask_input:
            if mask is None:
                raise ValidationError("this configuration requires a mask input")
            if mask.shape != luma_hat.shape:
                raise ValidationError(
                    f"mask shape {tuple(mask.shape)} does not match luma "
                    f"{tuple(luma_hat.shape)}"
                )

        multiple = self.cfg.pad_multiple
        luma_p, (h, w) = _pad_input(luma_hat, multiple)
        chroma_p, _ = _pad_input(chroma, multiple)
        parts = [luma_p, chroma_p]
        if self.cfg.mask_input:
            mask_p, _ = _pad_input(mask, multiple)
            parts.append(mask_p)

        color = self.color_encoder(chroma_p)
        roa_ctx = [color[k] if k in self.cfg.roa_stages else None for k in range(4)]

        x = self.embed(torch.cat(parts, dim=1))
        skips = []
        for k in range(3):
            x = _run_stage(self.encoder[k], x, roa_ctx[k])
            skips.append(self.inject[k](x, color[k]))
            x = self.downs[k](x)
        x = _run_stage(self.bottleneck, x, roa_ctx[3])
        x = self.inject[3](x, color[3])
        for i, k in enumerate(reversed(range(3))):
            x = self.ups[i](x)
            x = self.fuses[i](torch.cat([x, skips[k]], dim=1))
            x = _run_stage(self.decoder[i], x, roa_ctx[k])
        delta = self.head(x)
        out = (chroma_p + delta).clamp(0.0, 1.0)
        return out[..., :h, :w]


def _as_lr_config(cfg: CrNetConfig):
    from .lrnet import LrNetConfig

    return LrNetConfig(
        base_dim=cfg.base_dim,
        blocks_per_stage=cfg.blocks_per_stage,
        heads=cfg.heads,
        window=cfg.window,
        roa_stages=cfg.roa_stages,
        mask_input=cfg.mask_input,
        lambda_init=cfg.lambda_init,
        split_bias=cfg.split_bias,
    )


def import_color_encoder(model: CrNet, archive_path) -> None:
    """Load a pretrained color-encoder archive into ``model`` in place.

    Block names must match ``model.color_encoder.state_dict()`` keys
    (stem.*, stages.*, downs.*).
    """
    load_module(archive_path, model.color_encoder)


def _to_tensor(plane: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(plane, dtype=np.float32))


def restore_planes(
    img: RgbImage,
    mask: np.ndarray,
    lrnet: LrNet,
    crnet: CrNet,
) -> tuple[LumaPlane, ChromaPlanes]:
    """Run both networks on one image; returns the restored planes."""
    if np.asarray(mask).shape != img.data.shape[:2]:
        raise ValidationError(
            f"mask shape {np.asarray(mask).shape} does not match image "
            f"{img.data.shape[:2]}"
        )
    luma, chroma = decouple(img)
    lt = _to_tensor(luma.data)[None, None]
    ct = torch.stack([_to_tensor(chroma.cb), _to_tensor(chroma.cr)])[None]
    mt = _to_tensor(np.asarray(mask, dtype=np.float64))[None, None]
    was_training = (lrnet.training, crnet.training)
    lrnet.eval()
    crnet.eval()
    try:
        with torch.no_grad():
            luma_hat = lrnet(lt, ct, mt if lrnet.cfg.mask_input else None)
            chroma_hat = crnet(luma_hat, ct, mt if crnet.cfg.mask_input else None)
    finally:
        lrnet.train(was_training[0])
        crnet.train(was_training[1])
    restored_luma = LumaPlane(luma_hat[0, 0].numpy().astype(np.float64))
    restored_chroma = ChromaPlanes(
        chroma_hat[0, 0].numpy().astype(np.float64),
        chroma_hat[0, 1].numpy().astype(np.float64),
    )
    return restored_luma, restored_chroma


def remove_shadow(
    img: RgbImage,
    mask: np.ndarray,
    lrnet: LrNet,
    crnet: CrNet,
) -> RgbImage:
    """Full pipeline: decouple, restore luminance, regenerate color, recouple."""
    restored_luma, restored_chroma = restore_planes(img, mask, lrnet, crnet)
    return recouple(restored_luma, restored_chroma)
