"""U-shaped luminance restoration network.

Four stages at dims 32/64/128/256 with three stride-2 downsamples.  The
two shallow stages use local range blocks (texture); the two deep stages
use rectified outreach attention with chroma-derived context features, so
long-range matching can consult where the color cast sits.  Every stage
also carries channel attention and a per-pixel FFN.  The decoder mirrors
the encoder with pixel-shuffle upsampling and concatenation skips, a
full-resolution refinement pair follows, and the head predicts a residual
added to the input luminance:

    out = clamp(I_t + delta, 0, 1)

With the default zero-initialized head the network is exactly the
identity, which anchors the restoration to the input from step one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    ChannelLayerNorm,
    FeedForward,
    LocalRangeBlock,
    MultiheadTransposedAttention,
    RectifiedOutreachAttention,
    WindowGeometry,
)
from .errors import ValidationError


@dataclass(frozen=True)
class LrNetConfig:
    base_dim: int = 32
    blocks_per_stage: int = 2
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    window: WindowGeometry = field(default_factory=WindowGeometry)
    roa_stages: tuple[int, ...] = (2, 3)  # 0-indexed; stage 3 is the bottleneck
    mask_input: bool = True
    lambda_init: float = 0.7
    split_bias: bool = False
    init_head: str = "zero"  # "zero" -> exact identity at init; or "random"

    def __post_init__(self):
        if self.base_dim < 1 or self.blocks_per_stage < 1:
            raise ValidationError("base_dim and blocks_per_stage must be >= 1")
        if len(self.heads) != 4:
            raise ValidationError("heads must list one entry per stage (4)")
        if not set(self.roa_stages) <= {0, 1, 2, 3}:
            raise ValidationError("roa_stages must be a subset of {0,1,2,3}")
        if self.init_head not in ("zero", "random"):
            raise ValidationError("init_head must be 'zero' or 'random'")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.base_dim * 2**k for k in range(4))

    @property
    def pad_multiple(self) -> int:
        return self.window.window_size * 8  # 3 downsamples


def _pad_input(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        # reflect needs pad < size; replicate covers very small inputs
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


class RestorationBlock(nn.Module):
    """One stage unit: spatial mixer (LRB or ROA), channel attention, FFN,
    each pre-normalized with a residual connection."""

    def __init__(
        self,
        dim: int,
        heads: int,
        use_roa: bool,
        ctx_dim: int = 0,
        geometry: WindowGeometry | None = None,
        lambda_init: float = 0.7,
        split_bias: bool = False,
    ):
        super().__init__()
        self.use_roa = use_roa
        self.norm1 = ChannelLayerNorm(dim)
        if use_roa:
            self.spatial = RectifiedOutreachAttention(
                dim, ctx_dim, heads, geometry or WindowGeometry(),
                lambda_init=lambda_init, split_bias=split_bias,
            )
        else:
            self.spatial = LocalRangeBlock(dim)
        self.norm2 = ChannelLayerNorm(dim)
        self.mta = MultiheadTransposedAttention(dim, heads)
        self.norm3 = ChannelLayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None) -> torch.Tensor:
        if self.use_roa:
            x = x + self.spatial(self.norm1(x), ctx)
        else:
            x = x + self.spatial(self.norm1(x))
        x = x + self.mta(self.norm2(x))
        x = x + self.ffn(self.norm3(x))
        return x


class Downsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim * 2, 3, stride=2, padding=1, padding_mode="reflect")

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim * 2, 3, padding=1, padding_mode="reflect")
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class ContextPyramid(nn.Module):
    """Stride-2 convolution stack turning the chroma planes into context
    features at every stage resolution."""

    def __init__(self, in_channels: int, dims: tuple[int, ...]):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, dims[0], 3, padding=1, padding_mode="reflect")
        self.downs = nn.ModuleList(
            nn.Conv2d(
                dims[k], dims[k + 1], 3, stride=2, padding=1, padding_mode="reflect"
            )
            for k in range(len(dims) - 1)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = [F.gelu(self.stem(x))]
        for down in self.downs:
            features.append(F.gelu(down(features[-1])))
        return features


def _make_stage(cfg: LrNetConfig, stage: int) -> nn.ModuleList:
    use_roa = stage in cfg.roa_stages
    return nn.ModuleList(
        RestorationBlock(
            cfg.dims[stage],
            cfg.heads[stage],
            use_roa,
            ctx_dim=cfg.dims[stage] if use_roa else 0,
            geometry=cfg.window,
            lambda_init=cfg.lambda_init,
            split_bias=cfg.split_bias,
        )
        for _ in range(cfg.blocks_per_stage)
    )


def _run_stage(blocks: nn.ModuleList, x: torch.Tensor, ctx: torch.Tensor | None) -> torch.Tensor:
    for block in blocks:
        x = block(x, ctx if block.use_roa else None)
    return x


class LrNet(nn.Module):
    """Luminance restoration network; see the module docstring."""

    def __init__(self, cfg: LrNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or LrNetConfig()
        dims = cfg.dims
        in_channels = 1 + (1 if cfg.mask_input else 0)
        self.embed = nn.Conv2d(in_channels, dims[0], 3, padding=1, padding_mode="reflect")
        self.context = ContextPyramid(2, dims) if cfg.roa_stages else None

        self.encoder = nn.ModuleList(_make_stage(cfg, k) for k in range(3))
        self.downs = nn.ModuleList(Downsample(dims[k]) for k in range(3))
        self.bottleneck = _make_stage(cfg, 3)
        self.ups = nn.ModuleList(Upsample(dims[k + 1]) for k in reversed(range(3)))
        self.fuses = nn.ModuleList(
            nn.Conv2d(dims[k] * 2, dims[k], 1) for k in reversed(range(3))
        )
        self.decoder = nn.ModuleList(_make_stage(cfg, k) for k in reversed(range(3)))
        self.refine = nn.ModuleList(
            RestorationBlock(dims[0], cfg.heads[0], use_roa=False)
            for _ in range(2)
        )
        self.head = nn.Conv2d(dims[0], 1, 3, padding=1, padding_mode="reflect")
        if cfg.init_head == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(
        self,
        luma: torch.Tensor,
        chroma: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if luma.ndim != 4 or luma.shape[1] != 1:
            raise ValidationError(f"luma must be (B,1,H,W), got {tuple(luma.shape)}")
        if chroma.shape != (luma.shape[0], 2, *luma.shape[-2:]):
            raise ValidationError(
                f"chroma shape {tuple(chroma.shape)} does not match luma {tuple(luma.shape)}"
            )
        if self.cfg.mask_input:
            if mask is None:
                raise ValidationError("this configuration requires a mask input")
            if mask.shape != luma.shape:
                raise ValidationError(
                    f"mask shape {tuple(mask.shape)} does not match luma {tuple(luma.shape)}"
                )

        multiple = self.cfg.pad_multiple
        luma_p, (h, w) = _pad_input(luma, multiple)
        chroma_p, _ = _pad_input(chroma, multiple)
        net_in = luma_p
        if self.cfg.mask_input:
            mask_p, _ = _pad_input(mask, multiple)
            net_in = torch.cat([luma_p, mask_p], dim=1)

        ctx = self.context(chroma_p) if self.context is not None else [None] * 4

        x = self.embed(net_in)
        skips = []
        for k in range(3):
            x = _run_stage(self.encoder[k], x, ctx[k])
            skips.append(x)
            x = self.downs[k](x)
        x = _run_stage(self.bottleneck, x, ctx[3])
        for i, k in enumerate(reversed(range(3))):
            x = self.ups[i](x)
            x = self.fuses[i](torch.cat([x, skips[k]], dim=1))
            x = _run_stage(self.decoder[i], x, ctx[k])
        for block in self.refine:
            x = block(x)
        delta = self.head(x)
        out = (luma_p + delta).clamp(0.0, 1.0)
        return out[..., :h, :w]


def luminance_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    perceptual=None,
    w_p: float = 0.1,
) -> torch.Tensor:
    """Mean absolute error plus an optional perceptual term.

    ``perceptual`` is a callable on two (B,3,H,W) tensors; single-channel
    inputs are replicated to 3 channels before it is applied.
    """
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    loss = (pred - gt).abs().mean()
    if perceptual is not None and w_p > 0:
        expand = (lambda t: t.expand(-1, 3, -1, -1)) if pred.shape[1] == 1 else (lambda t: t)
        loss = loss + w_p * perceptual(expand(pred), expand(gt))
    return loss
