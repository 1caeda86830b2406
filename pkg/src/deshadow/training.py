"""Training machinery for the three networks.

The same small toolkit drives all loops: a cosine learning-rate schedule
on a decoupled-weight-decay optimizer, a frozen feature pyramid standing
in for a pretrained perceptual network, geometric/color augmentation with
mixup, and the snapshot pool used to train the color network against
imperfect luminance restorations.

The color network never sees gradients from the luminance network: the
sampled snapshot runs under ``no_grad``, so a pool of one containing the
final luminance weights reproduces ensemble-free training bit for bit
(the pool draws come from their own random stream, so skipping them does
not shift the data stream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import apply_blocks, load_module, module_blocks
from .colorspace import RgbImage, decouple_tensor, recouple_tensor
from .crnet import CrNet, CrNetConfig
from .data_io import Triplet
from .errors import NumericsError, ValidationError
from .lrnet import LrNet, LrNetConfig, luminance_loss
from .mask_refine import MaskRefineConfig, MaskRefineNet, corrupt_mask, mask_loss


@dataclass(frozen=True)
class OptimizerConfig:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    total_steps: int = 2000
    crop: int = 96
    batch: int = 4

    def __post_init__(self):
        problems = []
        if self.lr_end > self.lr_start:
            problems.append(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1, got {self.total_steps}")
        if self.crop < 1:
            problems.append(f"crop must be >= 1, got {self.crop}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if problems:
            raise ValidationError("invalid optimizer config", problems=problems)


def full_scale() -> OptimizerConfig:
    """The 384-crop recipe used for full benchmark training runs.

    The published recipe fixes everything except the step count; 200k is
    a nominal long schedule.  Desk-scale work uses the defaults instead.
    """
    return OptimizerConfig(total_steps=200_000, crop=384, batch=8)


def cosine_lr(step: int | float, cfg: OptimizerConfig) -> float:
    """Half-cosine decay from lr_start at step 0 to lr_end at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValidationError(
            f"step {step} outside schedule range [0, {cfg.total_steps}]"
        )
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (
        1.0 + math.cos(math.pi * step / cfg.total_steps)
    )


def make_optimizer(module: nn.Module, cfg: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        module.parameters(),
        lr=cfg.lr_start,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class PerceptualExtractor(nn.Module):
    """Frozen three-level convolutional feature pyramid.

    Weights are drawn from a fixed-seed generator, so every run measures
    distances in the same feature space; ``import_weights`` swaps in a
    pretrained archive when one is available.  Random multi-scale
    features are enough to make the loss see structure rather than raw
    pixels, which is all the overfit-scale experiments need.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        specs = [(3, 16, 1), (16, 32, 2), (32, 64, 2)]
        self.levels = nn.ModuleList()
        for cin, cout, stride in specs:
            conv = nn.Conv2d(
                cin, cout, 3, stride=stride, padding=1, padding_mode="reflect"
            )
            with torch.no_grad():
                weight = torch.randn(conv.weight.shape, generator=gen)
                conv.weight.copy_(weight * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            self.levels.append(conv)
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for conv in self.levels:
            x = F.gelu(conv(x))
            out.append(x)
        return out

    def forward(self, a, b) -> torch.Tensor:
        return perceptual_loss(a, b, self)

    def import_weights(self, path: str | Path) -> None:
        load_module(path, self)


def _to_bchw(x) -> torch.Tensor:
    if isinstance(x, RgbImage):
        x = x.data
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        if t.ndim == 3 and t.shape[-1] == 3:
            t = t.permute(2, 0, 1)
        return t[None]
    if x.ndim == 3:
        return x[None]
    return x


def perceptual_loss(a, b, extractor: PerceptualExtractor) -> torch.Tensor:
    """Sum over pyramid levels of mean absolute feature differences."""
    ta, tb = _to_bchw(a), _to_bchw(b)
    if ta.shape != tb.shape:
        raise ValidationError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    fa = extractor.features(ta)
    fb = extractor.features(tb)
    total = ta.new_zeros(())
    for la, lb in zip(fa, fb):
        total = total + (la - lb).abs().mean()
    return total


@dataclass(frozen=True)
class AugmentationConfig:
    rotate: bool = True
    hflip: bool = True
    vflip: bool = True
    brightness: tuple[float, float] = (0.9, 1.1)
    saturation: tuple[float, float] = (0.9, 1.1)
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.mixup_prob <= 1.0:
            problems.append(f"mixup_prob must be in [0,1], got {self.mixup_prob}")
        if self.mixup_alpha <= 0:
            problems.append(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        for name in ("brightness", "saturation"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                problems.append(f"{name} range must satisfy 0 <= lo <= hi")
        if problems:
            raise ValidationError("invalid augmentation config", problems=problems)


def no_augmentation() -> AugmentationConfig:
    return AugmentationConfig(
        rotate=False,
        hflip=False,
        vflip=False,
        brightness=(1.0, 1.0),
        saturation=(1.0, 1.0),
        mixup_prob=0.0,
    )


def _triplet_from_arrays(src: Triplet, shadow, mask, gt) -> Triplet:
    return Triplet(
        id=src.id,
        shadow=RgbImage(np.ascontiguousarray(shadow)),
        mask=np.ascontiguousarray(mask),
        gt=None if gt is None else RgbImage(np.ascontiguousarray(gt)),
    )


def mixup_blend(a: Triplet, b: Triplet, w: float) -> Triplet:
    """Blend two triplets with one shared weight; masks become soft."""
    if a.shadow.data.shape != b.shadow.data.shape:
        raise ValidationError(
            f"mixup needs same-size triplets, got {a.shadow.data.shape} "
            f"vs {b.shadow.data.shape}"
        )
    u = 1.0 - w
    shadow = w * a.shadow.data + u * b.shadow.data
    mask = w * a.mask + u * b.mask
    gt = None
    if a.gt is not None and b.gt is not None:
        gt = w * a.gt.data + u * b.gt.data
    return _triplet_from_arrays(a, shadow, mask, gt)


def augment(
    triplet: Triplet,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    partner: Triplet | None = None,
) -> Triplet:
    """Random rotation/flips on all planes, color jitter on the input
    only, then an optional mixup with ``partner`` (recursively augmented
    the same way, minus its own mixup)."""
    shadow = triplet.shadow.data
    mask = triplet.mask
    gt = None if triplet.gt is None else triplet.gt.data

    def all_planes(fn):
        nonlocal shadow, mask, gt
        shadow = fn(shadow)
        mask = fn(mask)
        if gt is not None:
            gt = fn(gt)

    if cfg.rotate:
        k = int(rng.integers(0, 4))
        all_planes(lambda p: np.rot90(p, k, axes=(0, 1)))
    if cfg.hflip and rng.integers(0, 2):
        all_planes(lambda p: p[:, ::-1])
    if cfg.vflip and rng.integers(0, 2):
        all_planes(lambda p: p[::-1])

    lo, hi = cfg.brightness
    if (lo, hi) != (1.0, 1.0):
        shadow = np.clip(shadow * rng.uniform(lo, hi), 0.0, 1.0)
    lo, hi = cfg.saturation
    if (lo, hi) != (1.0, 1.0):
        gray = shadow.mean(axis=2, keepdims=True)
        shadow = np.clip(gray + rng.uniform(lo, hi) * (shadow - gray), 0.0, 1.0)

    out = _triplet_from_arrays(triplet, shadow, mask, gt)
    if partner is not None and cfg.mixup_prob > 0 and rng.random() < cfg.mixup_prob:
        other = augment(partner, replace(cfg, mixup_prob=0.0), rng)
        out = mixup_blend(out, other, float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)))
    return out


def random_crop(triplet: Triplet, crop: int, rng: np.random.Generator) -> Triplet:
    """Take one random crop (shared window across planes), clamped to the
    image size when the image is smaller than the requested crop."""
    h, w = triplet.mask.shape
    ch, cw = min(crop, h), min(crop, w)
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (h, w):
        return triplet
    return _triplet_from_arrays(
        triplet,
        triplet.shadow.data[y : y + ch, x : x + cw],
        triplet.mask[y : y + ch, x : x + cw],
        None if triplet.gt is None else triplet.gt.data[y : y + ch, x : x + cw],
    )


# --- checkpoint pool ---------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    step: int
    blocks: dict[str, np.ndarray]


@dataclass
class CheckpointPool:
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self, module: nn.Module, step: int) -> None:
        self.entries.append(PoolEntry(step=step, blocks=module_blocks(module)))


def sample_checkpoint(pool: CheckpointPool, rng: np.random.Generator) -> PoolEntry:
    """Uniform draw from the pool; deterministic under a seeded rng."""
    if len(pool) == 0:
        raise ValidationError("checkpoint pool is empty")
    return pool.entries[int(rng.integers(0, len(pool)))]


# --- training loops ----------------------------------------------------------


def _check_dataset(dataset: Sequence[Triplet], need_gt: bool = True) -> None:
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    if need_gt:
        missing = [t.id for t in dataset if t.gt is None]
        if missing:
            raise ValidationError(
                "training requires ground truth for every triplet",
                problems=[f"no gt: {i}" for i in missing],
            )


def _sample_batch(
    dataset: Sequence[Triplet],
    opt_cfg: OptimizerConfig,
    aug_cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> list[Triplet]:
    batch = []
    n = len(dataset)
    use_mixup = aug_cfg.mixup_prob > 0
    for _ in range(opt_cfg.batch):
        triplet = dataset[int(rng.integers(0, n))]
        partner = dataset[int(rng.integers(0, n))] if use_mixup else None
        triplet = augment(triplet, aug_cfg, rng, partner=partner)
        batch.append(random_crop(triplet, opt_cfg.crop, rng))
    return batch


def _batch_tensors(batch: list[Triplet]) -> dict[str, torch.Tensor]:
    def stack(arrays):
        return torch.from_numpy(
            np.ascontiguousarray(np.stack(arrays), dtype=np.float32)
        )

    shadow = stack([t.shadow.data for t in batch]).permute(0, 3, 1, 2)
    gt = stack([t.gt.data for t in batch]).permute(0, 3, 1, 2)
    mask = stack([t.mask for t in batch])[:, None]
    luma_in, chroma_in = decouple_tensor(shadow)
    gt_luma, gt_chroma = decouple_tensor(gt)
    return {
        "shadow": shadow,
        "gt": gt,
        "mask": mask,
        "luma_in": luma_in,
        "chroma_in": chroma_in,
        "gt_luma": gt_luma,
        "gt_chroma": gt_chroma,
    }


def _require_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise NumericsError(
            f"{what} training hit a non-finite loss at step {step} "
            f"(value {loss.item()}); aborting"
        )


class MetricsLog:
    """Append-only tab-delimited log: step, lr, then loss components."""

    def __init__(self, path: str | Path | None, columns: list[str]):
        self.path = None if path is None else Path(path)
        self.columns = columns
        self.lines: list[str] = []
        self._write_header()

    def _write_header(self):
        header = "# " + "\t".join(["step", "lr", *self.columns])
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(header + "\n")
        self.lines.append(header)

    def record(self, step: int, lr: float, values: list[float]) -> None:
        cells = [str(step), f"{lr:.8g}", *(f"{v:.8g}" for v in values)]
        line = "\t".join(cells)
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def snapshot_steps(total_steps: int, count: int) -> list[int]:
    """Evenly spaced snapshot points covering the first half of training."""
    half = max(1, total_steps // 2)
    steps = sorted({max(1, round(half * (k + 1) / count)) for k in range(count)})
    return steps


def train_lrnet(
    dataset: Sequence[Triplet],
    opt_cfg: OptimizerConfig | None = None,
    net_cfg: LrNetConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
    *,
    seed: int = 0,
    w_p: float = 0.1,
    perceptual: PerceptualExtractor | None = None,
    snapshots: int = 5,
    log_path: str | Path | None = None,
    log_every: int = 50,
) -> tuple[LrNet, CheckpointPool, MetricsLog]:
    """Luminance-network training; also fills the early-snapshot pool."""
    opt_cfg = opt_cfg or OptimizerConfig()
    aug_cfg = aug_cfg or AugmentationConfig()
    _check_dataset(dataset)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    torch.manual_seed(seed)
    net = LrNet(net_cfg)
    net.train()
    optimizer = make_optimizer(net, opt_cfg)
    if w_p > 0 and perceptual is None:
        perceptual = PerceptualExtractor()
    pool = CheckpointPool()
    snap_at = set(snapshot_steps(opt_cfg.total_steps, snapshots))
    log = MetricsLog(log_path, ["l1", "perceptual", "total"])

    for step in range(opt_cfg.total_steps):
        lr = cosine_lr(step, opt_cfg)
        _set_lr(optimizer, lr)
        tensors = _batch_tensors(_sample_batch(dataset, opt_cfg, aug_cfg, rng))
        pred = net(tensors["luma_in"], tensors["chroma_in"], tensors["mask"])
        l1 = (pred - tensors["gt_luma"]).abs().mean()
        loss = luminance_loss(
            pred, tensors["gt_luma"], perceptual=perceptual if w_p > 0 else None, w_p=w_p
        )
        _require_finite(loss, step, "luminance network")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        done = step + 1
        if done in snap_at:
            pool.snapshot(net, done)
        if step % log_every == 0 or done == opt_cfg.total_steps:
            perc = (loss.item() - l1.item()) / w_p if w_p > 0 else 0.0
            log.record(step, lr, [l1.item(), perc, loss.item()])
    return net, pool, log


def train_crnet(
    dataset: Sequence[Triplet],
    pool: CheckpointPool | None = None,
    opt_cfg: OptimizerConfig | None = None,
    net_cfg: CrNetConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
    *,
    lrnet: LrNet | None = None,
    lrnet_cfg: LrNetConfig | None = None,
    seed: int = 0,
    w_p: float = 0.1,
    perceptual: PerceptualExtractor | None = None,
    loss_space: str = "rgb",
    log_path: str | Path | None = None,
    log_every: int = 50,
) -> tuple[CrNet, MetricsLog]:
    """Color-network training against sampled luminance snapshots.

    With ``pool`` given, each batch draws a snapshot (from a dedicated
    random stream) and restores luminance with it under ``no_grad``.
    Without a pool, ``lrnet`` is used as a fixed restorer — equivalent to
    a pool of one holding those same weights.
    """
    opt_cfg = opt_cfg or OptimizerConfig()
    aug_cfg = aug_cfg or AugmentationConfig()
    _check_dataset(dataset)
    if loss_space not in ("rgb", "chroma"):
        raise ValidationError(f"loss_space must be 'rgb' or 'chroma', got {loss_space!r}")
    if pool is not None and len(pool) == 0:
        raise ValidationError("checkpoint pool is empty")
    if pool is None and lrnet is None:
        raise ValidationError("need a checkpoint pool or a fixed luminance network")

    data_seed, pool_seed = np.random.SeedSequence(seed).spawn(2)
    rng_data = np.random.default_rng(data_seed)
    rng_pool = np.random.default_rng(pool_seed)

    torch.manual_seed(seed)
    net = CrNet(net_cfg)
    net.train()
    optimizer = make_optimizer(net, opt_cfg)
    if w_p > 0 and perceptual is None:
        perceptual = PerceptualExtractor()
    log = MetricsLog(log_path, ["l1", "perceptual", "total"])

    if pool is not None:
        shell = lrnet if lrnet is not None else LrNet(lrnet_cfg)
    else:
        shell = lrnet
    shell.eval()
    loaded: int | None = None

    for step in range(opt_cfg.total_steps):
        lr = cosine_lr(step, opt_cfg)
        _set_lr(optimizer, lr)
        tensors = _batch_tensors(_sample_batch(dataset, opt_cfg, aug_cfg, rng_data))

        if pool is not None:
            entry = sample_checkpoint(pool, rng_pool)
            if loaded != id(entry):
                apply_blocks(shell, entry.blocks)
                loaded = id(entry)
        with torch.no_grad():
            luma_hat = shell(tensors["luma_in"], tensors["chroma_in"], tensors["mask"])

        pred_chroma = net(luma_hat, tensors["chroma_in"], tensors["mask"])
        if loss_space == "rgb":
            rgb_hat = recouple_tensor(luma_hat, pred_chroma)
            l1 = (rgb_hat - tensors["gt"]).abs().mean()
            loss = l1
            if w_p > 0:
                loss = loss + w_p * perceptual_loss(rgb_hat, tensors["gt"], perceptual)
        else:
            l1 = (pred_chroma - tensors["gt_chroma"]).abs().mean()
            loss = l1
        _require_finite(loss, step, "color network")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step % log_every == 0 or step + 1 == opt_cfg.total_steps:
            perc = (loss.item() - l1.item()) / w_p if w_p > 0 else 0.0
            log.record(step, lr, [l1.item(), perc, loss.item()])
    return net, log


def train_maskrefine(
    dataset: Sequence[Triplet],
    opt_cfg: OptimizerConfig | None = None,
    net_cfg: MaskRefineConfig | None = None,
    *,
    seed: int = 0,
    log_path: str | Path | None = None,
    log_every: int = 50,
) -> tuple[MaskRefineNet, MetricsLog]:
    """Mask-refinement training on synthetic corruptions of clean masks."""
    opt_cfg = opt_cfg or OptimizerConfig()
    _check_dataset(dataset, need_gt=False)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    torch.manual_seed(seed)
    net = MaskRefineNet(net_cfg)
    net.train()
    optimizer = make_optimizer(net, opt_cfg)
    log = MetricsLog(log_path, ["loss"])
    n = len(dataset)

    for step in range(opt_cfg.total_steps):
        lr = cosine_lr(step, opt_cfg)
        _set_lr(optimizer, lr)
        rgbs, cleans, dirties = [], [], []
        for _ in range(opt_cfg.batch):
            triplet = random_crop(dataset[int(rng.integers(0, n))], opt_cfg.crop, rng)
            rgbs.append(triplet.shadow.data)
            cleans.append(triplet.mask)
            dirties.append(corrupt_mask(triplet.mask, rng))
        rgb = torch.from_numpy(
            np.ascontiguousarray(np.stack(rgbs), dtype=np.float32)
        ).permute(0, 3, 1, 2)
        clean = torch.from_numpy(np.stack(cleans).astype(np.float32))[:, None]
        dirty = torch.from_numpy(np.stack(dirties).astype(np.float32))[:, None]

        loss = mask_loss(net(rgb, dirty), clean)
        _require_finite(loss, step, "mask refinement")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % log_every == 0 or step + 1 == opt_cfg.total_steps:
            log.record(step, lr, [loss.item()])
    return net, log
