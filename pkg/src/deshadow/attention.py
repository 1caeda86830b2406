"""Window attention primitives for the restoration networks.

The deep stages attend inside small square windows but read keys and
values from larger concentric "outreach" windows, optionally subsampled
with a stride (dilation).  Two attention maps are formed per window — one
from the concatenated luminance+color features, one from the color
features alone — and the second is subtracted after scaling by a learnable
rectification weight:

    out = (Att1 - lambda * Att2) V

Att2 concentrates on color-cast structure, so subtracting it suppresses
the attention mass that merely tracks the shadow tint while Att1 keeps the
mass that tracks texture.  ``lambda`` is re-parameterized through
exponentials of two learnable scalar products plus a fixed offset, so it
stays positive around its initialization and moves smoothly.

Also here: the channel-transposed multi-head attention, the local range
block (depthwise 3x3 with gating), the per-pixel feed-forward block, and
the channel layer norm shared by both networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

LAMBDA_PRODUCT_CLAMP = 30.0


@dataclass(frozen=True)
class WindowGeometry:
    """Square attention window plus its concentric outreach window.

    ``window_size`` (M) tiles the feature map for queries.  Keys/values
    come from outreach windows of side ``floor((1+overlap_ratio) * M)``
    sharing the window's center, sampled every ``dilation`` pixels.
    """

    window_size: int = 4
    overlap_ratio: float = 0.5
    dilation: int = 1

    def __post_init__(self):
        if self.window_size < 1:
            raise ValidationError("window_size must be >= 1")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValidationError("overlap_ratio must lie in [0, 1)")
        if self.dilation < 1 or self.dilation > self.window_size:
            raise ValidationError("dilation must lie in [1, window_size]")

    @property
    def outreach_size(self) -> int:
        return int(math.floor((1.0 + self.overlap_ratio) * self.window_size))

    @property
    def tokens_per_side(self) -> int:
        """Sampled key/value positions per outreach-window side."""
        return -(-self.outreach_size // self.dilation)

    @property
    def pad_before(self) -> int:
        """Offset of the outreach window's first row/col before the window's."""
        return (self.outreach_size - self.window_size) // 2


def pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad (bottom/right) so H and W are multiples of ``m``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


def partition_windows(x: torch.Tensor, m: int) -> torch.Tensor:
    """(B,C,H,W) -> (B, num_windows, M*M, C) token windows; H,W % M == 0."""
    b, c, h, w = x.shape
    if h % m or w % m:
        raise ValidationError(f"spatial size {h}x{w} not a multiple of window {m}")
    nh, nw = h // m, w // m
    x = x.view(b, c, nh, m, nw, m)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, nh * nw, m * m, c)


def merge_windows(windows: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`partition_windows` for the same padded H, W."""
    b, nwin, m2, c = windows.shape
    m = math.isqrt(m2)
    nh, nw = h // m, w // m
    if nh * nw != nwin or m * m != m2:
        raise ValidationError("window batch does not tile the requested size")
    x = windows.view(b, nh, nw, m, m, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def partition_outreach(x: torch.Tensor, geometry: WindowGeometry) -> torch.Tensor:
    """Concentric outreach windows as (B, num_windows, T*T, C) tokens.

    T = ``geometry.tokens_per_side``; positions start at the outreach
    window's top-left corner and step by the dilation.  Out-of-bounds
    positions are reflected.  Window order matches partition_windows.
    """
    b, c, h, w = x.shape
    m = geometry.window_size
    if h % m or w % m:
        raise ValidationError(f"spatial size {h}x{w} not a multiple of window {m}")
    nt = geometry.tokens_per_side
    lo = geometry.pad_before
    span = (nt - 1) * geometry.dilation + 1
    hi = max(span - m - lo, 0)
    if c == 0:
        return x.new_zeros(b, (h // m) * (w // m), nt * nt, 0)
    xp = F.pad(x, (lo, hi, lo, hi), mode="reflect")
    cols = F.unfold(xp, kernel_size=nt, dilation=geometry.dilation, stride=m)
    nwin = (h // m) * (w // m)
    return cols.view(b, c, nt * nt, nwin).permute(0, 3, 2, 1)


def attention_map(q: torch.Tensor, k: torch.Tensor, bias=None, head_dim=None) -> torch.Tensor:
    """Row-stochastic map: softmax over keys of q k^T / sqrt(d) + bias."""
    d = head_dim if head_dim is not None else q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias
    return logits.softmax(dim=-1)


def lambda_value(l1a, l1b, l2a, l2b, lambda_init: float):
    """Rectification weight: exp(l1a*l1b) - exp(l2a*l2b) + lambda_init.

    The scalar products are clamped to +-30 before exponentiation; the
    returned flag reports whether any product saturated the clamp.
    """
    def _tensor(v):
        return v if torch.is_tensor(v) else torch.as_tensor(v, dtype=torch.float64)

    p1 = _tensor(l1a) * _tensor(l1b)
    p2 = _tensor(l2a) * _tensor(l2b)
    saturated = bool(
        (p1.abs() > LAMBDA_PRODUCT_CLAMP).any() or (p2.abs() > LAMBDA_PRODUCT_CLAMP).any()
    )
    lam = (
        torch.exp(p1.clamp(-LAMBDA_PRODUCT_CLAMP, LAMBDA_PRODUCT_CLAMP))
        - torch.exp(p2.clamp(-LAMBDA_PRODUCT_CLAMP, LAMBDA_PRODUCT_CLAMP))
        + lambda_init
    )
    return lam, saturated


class OutreachRelativeBias(nn.Module):
    """Learnable attention bias indexed by query-key spatial offset.

    One table row per distinct 2D offset between a window position and a
    sampled outreach position; the index buffer is precomputed from the
    geometry, so the same module covers plain and dilated outreach.
    """

    def __init__(self, geometry: WindowGeometry, heads: int):
        super().__init__()
        m, nt = geometry.window_size, geometry.tokens_per_side
        q = torch.arange(m)
        p = -geometry.pad_before + torch.arange(nt) * geometry.dilation
        qy, qx = torch.meshgrid(q, q, indexing="ij")
        py, px = torch.meshgrid(p, p, indexing="ij")
        dy = qy.reshape(-1, 1) - py.reshape(1, -1)
        dx = qx.reshape(-1, 1) - px.reshape(1, -1)
        offsets = torch.stack([dy, dx], dim=-1).reshape(-1, 2)
        uniq, inverse = torch.unique(offsets, dim=0, return_inverse=True)
        self.table = nn.Parameter(torch.zeros(uniq.shape[0], heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        self.register_buffer("index", inverse.view(m * m, nt * nt), persistent=False)

    def forward(self) -> torch.Tensor:
        return self.table[self.index].permute(2, 0, 1)  # heads x M^2 x T^2


@dataclass
class AttentionMaps:
    """Per-head maps (batch, windows, heads, M^2, T^2) and the lambda used."""

    att1: torch.Tensor
    att2: torch.Tensor
    rectification: torch.Tensor


class RectifiedOutreachAttention(nn.Module):
    """Window attention with an outreach key/value field and rectification.

    Queries/keys for the primary map come from the channel concatenation of
    the main features and the ``ctx_dim`` context features; the secondary
    map uses the context alone.  Values come from the main features only.
    ``ctx_dim=0`` degenerates the secondary map to bias-only attention,
    which the zeroed rectification weight then removes entirely.
    """

    def __init__(
        self,
        dim: int,
        ctx_dim: int,
        heads: int,
        geometry: WindowGeometry,
        lambda_init: float = 0.7,
        split_bias: bool = False,
    ):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.geometry = geometry
        self.lambda_init = float(lambda_init)

        self.w_q1 = nn.Linear(dim + ctx_dim, dim, bias=False)
        self.w_k1 = nn.Linear(dim + ctx_dim, dim, bias=False)
        self.w_q2 = nn.Linear(ctx_dim, dim, bias=False)
        self.w_k2 = nn.Linear(ctx_dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)

        self.lambda1_a = nn.Parameter(torch.empty(heads).normal_(0, 0.1))
        self.lambda1_b = nn.Parameter(torch.empty(heads).normal_(0, 0.1))
        self.lambda2_a = nn.Parameter(torch.empty(heads).normal_(0, 0.1))
        self.lambda2_b = nn.Parameter(torch.empty(heads).normal_(0, 0.1))

        self.bias1 = OutreachRelativeBias(geometry, heads)
        self.bias2 = OutreachRelativeBias(geometry, heads) if split_bias else None
        self.lambda_saturated = False  # updated on every forward

    def rectification_weight(self) -> torch.Tensor:
        lam, saturated = lambda_value(
            self.lambda1_a, self.lambda1_b, self.lambda2_a, self.lambda2_b,
            self.lambda_init,
        )
        self.lambda_saturated = saturated
        return lam

    def _split_heads(self, tokens: torch.Tensor) -> torch.Tensor:
        b, nwin, t, _ = tokens.shape
        return tokens.view(b, nwin, t, self.heads, self.head_dim).transpose(2, 3)

    def _validate(self, f_t: torch.Tensor, f_c: torch.Tensor) -> None:
        if f_t.ndim != 4 or f_t.shape[1] != self.dim:
            raise ValidationError(
                f"expected (B,{self.dim},H,W) main features, got {tuple(f_t.shape)}"
            )
        if f_c.shape[1] != self.ctx_dim or f_c.shape[0] != f_t.shape[0] \
                or f_c.shape[-2:] != f_t.shape[-2:]:
            raise ValidationError(
                f"context shape {tuple(f_c.shape)} incompatible with main "
                f"features {tuple(f_t.shape)} (ctx_dim={self.ctx_dim})"
            )

    def _attend(self, f_t: torch.Tensor, f_c: torch.Tensor):
        """Maps and values for already window-aligned inputs."""
        m = self.geometry.window_size
        combined = torch.cat([f_t, f_c], dim=1)
        q1 = self._split_heads(self.w_q1(partition_windows(combined, m)))
        k1 = self._split_heads(self.w_k1(partition_outreach(combined, self.geometry)))
        q2 = self._split_heads(self.w_q2(partition_windows(f_c, m)))
        k2 = self._split_heads(self.w_k2(partition_outreach(f_c, self.geometry)))
        v = self._split_heads(self.w_v(partition_outreach(f_t, self.geometry)))
        b1 = self.bias1()
        b2 = self.bias2() if self.bias2 is not None else b1
        att1 = attention_map(q1, k1, b1, self.head_dim)
        att2 = attention_map(q2, k2, b2, self.head_dim)
        return att1, att2, v

    def attention_maps(self, f_t: torch.Tensor, f_c: torch.Tensor | None = None) -> AttentionMaps:
        if f_c is None:
            f_c = f_t.new_zeros(f_t.shape[0], 0, *f_t.shape[-2:])
        self._validate(f_t, f_c)
        m = self.geometry.window_size
        ft_p, _ = pad_to_multiple(f_t, m)
        fc_p = self._pad_ctx(f_c, ft_p)
        att1, att2, _ = self._attend(ft_p, fc_p)
        return AttentionMaps(att1=att1, att2=att2, rectification=self.rectification_weight())

    def _pad_ctx(self, f_c: torch.Tensor, ft_padded: torch.Tensor) -> torch.Tensor:
        if f_c.shape[1] == 0:
            return f_c.new_zeros(f_c.shape[0], 0, *ft_padded.shape[-2:])
        padded, _ = pad_to_multiple(f_c, self.geometry.window_size)
        return padded

    def forward(self, f_t: torch.Tensor, f_c: torch.Tensor | None = None) -> torch.Tensor:
        if f_c is None:
            f_c = f_t.new_zeros(f_t.shape[0], 0, *f_t.shape[-2:])
        self._validate(f_t, f_c)
        b, c, h, w = f_t.shape
        m = self.geometry.window_size
        ft_p, _ = pad_to_multiple(f_t, m)
        fc_p = self._pad_ctx(f_c, ft_p)
        hp, wp = ft_p.shape[-2:]

        att1, att2, v = self._attend(ft_p, fc_p)
        lam = self.rectification_weight().view(1, 1, self.heads, 1, 1)
        out = (att1 - lam * att2) @ v  # (b, nwin, heads, M^2, head_dim)
        nwin = out.shape[1]
        out = out.transpose(2, 3).reshape(b, nwin, m * m, self.dim)
        out = self.proj(out)
        return merge_windows(out, hp, wp)[:, :, :h, :w]


class MultiheadTransposedAttention(nn.Module):
    """Attention across channels instead of positions.

    Channel descriptors are L2-normalized over the token axis, so their
    pairwise similarities live in [-1, 1] and a learnable per-head
    temperature sets the softmax sharpness.  Every op is either per-token
    or a channel mix, so permuting spatial positions permutes the output
    the same way; the value/output path carries no bias, so zero input
    maps to zero output.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=False)
        self.proj = nn.Conv2d(dim, dim, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).view(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)
        out = (attn @ v).view(b, c, h, w)
        return self.proj(out)


class LocalRangeBlock(nn.Module):
    """Gated depthwise block for local texture: 1x1 expand (ratio 2) ->
    3x3 depthwise -> gelu(a) * b gate -> 1x1 project.  Receptive field is
    a single 3x3 neighborhood."""

    def __init__(self, dim: int, expansion: int = 2):
        super().__init__()
        hidden = dim * expansion
        self.expand = nn.Conv2d(dim, hidden, 1)
        self.local = nn.Conv2d(
            hidden, hidden, 3, padding=1, groups=hidden, padding_mode="reflect"
        )
        self.project = nn.Conv2d(hidden // 2, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.local(self.expand(x)).chunk(2, dim=1)
        return self.project(F.gelu(a) * b)


class FeedForward(nn.Module):
    """Per-pixel two-layer MLP (1x1 convs), expansion ratio 2.66."""

    def __init__(self, dim: int, expansion: float = 2.66):
        super().__init__()
        hidden = int(dim * expansion)
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at each spatial location."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)
