"""Command-line surface.

Subcommands::

    deshadow synth-gen       render a synthetic (input, mask, gt) dataset
    deshadow train-lrnet     train the luminance network, snapshot the pool
    deshadow train-crnet     train the color network against the pool
    deshadow train-maskrefine  train the mask refinement network
    deshadow infer           remove shadows from images
    deshadow eval            region metric grid (256x256 protocol)
    deshadow analyze-bias    shadow-region color-bias histograms

Every command accepts ``--config FILE`` (JSON; unknown keys rejected),
``--seed N``, and ``--deterministic``.  Command-line flags override their
config keys.  The effective config's hash is recorded in run directories
and weight archives, and checked again when archives are loaded.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric abort.
``SHADOWHACK_NUM_WORKERS`` (optional) caps CPU worker threads.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .archive import load_module, load_weights, save_module, save_weights
from .attention import WindowGeometry
from .crnet import CrNet, CrNetConfig, remove_shadow
from .data_io import (
    IMAGE_SUFFIXES,
    load_image,
    load_mask,
    load_triplet,
    save_image,
    scan_dataset,
)
from .errors import NumericsError, ValidationError
from .formation import DegradationConfig, color_bias_analysis, generate_dataset
from .lrnet import LrNet, LrNetConfig
from .mask_refine import MaskRefineConfig, MaskRefineNet, refine_mask
from .metrics import RegionMetrics, RegionReport, evaluate
from .training import (
    AugmentationConfig,
    CheckpointPool,
    OptimizerConfig,
    PoolEntry,
    train_crnet,
    train_lrnet,
    train_maskrefine,
)

WORKERS_ENV = "SHADOWHACK_NUM_WORKERS"


# --- config file -------------------------------------------------------------

_WINDOW_KEYS = {"window_size": int, "overlap_ratio": float, "dilation": int}
_NET_KEYS = {
    "base_dim": int,
    "blocks_per_stage": int,
    "heads": "ints",
    "window": "window",
    "roa_stages": "ints",
    "mask_input": bool,
    "lambda_init": float,
    "split_bias": bool,
    "init_head": str,
}

SCHEMA = {
    "optimizer": {
        "lr_start": float,
        "lr_end": float,
        "betas": "floats",
        "weight_decay": float,
        "total_steps": int,
        "crop": int,
        "batch": int,
    },
    "augmentation": {
        "rotate": bool,
        "hflip": bool,
        "vflip": bool,
        "brightness": "floats",
        "saturation": "floats",
        "mixup_alpha": float,
        "mixup_prob": float,
    },
    "lrnet": dict(_NET_KEYS),
    "crnet": {**_NET_KEYS, "injection_window": int},
    "maskrefine": {"base_dim": int},
    "degradation": {
        "noise_std": float,
        "quant_bits": int,
        "blur_radius": float,
        "seed": int,
    },
    "training": {
        "w_p": float,
        "loss_space": str,
        "snapshots": int,
        "log_every": int,
    },
}


def default_config() -> dict:
    return {
        "optimizer": asdict(OptimizerConfig()),
        "augmentation": asdict(AugmentationConfig()),
        "lrnet": asdict(LrNetConfig()),
        "crnet": asdict(CrNetConfig()),
        "maskrefine": asdict(MaskRefineConfig()),
        "degradation": asdict(DegradationConfig()),
        "training": {"w_p": 0.1, "loss_space": "rgb", "snapshots": 5, "log_every": 50},
    }


def _coerce(section: str, key: str, kind, value, problems: list[str]):
    where = f"{section}.{key}"
    if kind is bool:
        if not isinstance(value, bool):
            problems.append(f"{where}: expected bool, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected int, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected number, got {value!r}")
        return float(value) if isinstance(value, (int, float)) else value
    if kind is str:
        if not isinstance(value, str):
            problems.append(f"{where}: expected string, got {value!r}")
        return value
    if kind == "ints":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            problems.append(f"{where}: expected a list of ints, got {value!r}")
            return value
        return tuple(value)
    if kind == "floats":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            problems.append(f"{where}: expected a list of numbers, got {value!r}")
            return value
        return tuple(float(v) for v in value)
    if kind == "window":
        if not isinstance(value, dict):
            problems.append(f"{where}: expected an object, got {value!r}")
            return value
        out = {}
        for k, v in value.items():
            if k not in _WINDOW_KEYS:
                problems.append(f"{where}.{k}: unknown key")
            else:
                out[k] = _coerce(f"{section}.{key}", k, _WINDOW_KEYS[k], v, problems)
        return out
    raise AssertionError(kind)


def merge_config(base: dict, overlay: dict) -> dict:
    """Validate ``overlay`` against the schema and merge it over ``base``."""
    merged = copy.deepcopy(base)
    problems: list[str] = []
    if not isinstance(overlay, dict):
        raise ValidationError("config file must hold a JSON object")
    for section, values in overlay.items():
        if section not in SCHEMA:
            problems.append(f"{section}: unknown section")
            continue
        if not isinstance(values, dict):
            problems.append(f"{section}: expected an object")
            continue
        for key, value in values.items():
            if key not in SCHEMA[section]:
                problems.append(f"{section}.{key}: unknown key")
                continue
            coerced = _coerce(section, key, SCHEMA[section][key], value, problems)
            if isinstance(coerced, dict):
                merged[section][key] = {**merged[section][key], **coerced}
            else:
                merged[section][key] = coerced
    if problems:
        raise ValidationError("invalid config file", problems=problems)
    return merged


def load_config(path: str | Path | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise OSError(f"config file not found: {path}")
    try:
        overlay = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file is not valid JSON: {e}")
    return merge_config(cfg, overlay)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


_OVERRIDES = {
    "steps": ("optimizer", "total_steps"),
    "batch": ("optimizer", "batch"),
    "crop": ("optimizer", "crop"),
    "lr_start": ("optimizer", "lr_start"),
    "lr_end": ("optimizer", "lr_end"),
    "w_p": ("training", "w_p"),
    "snapshots": ("training", "snapshots"),
    "loss_space": ("training", "loss_space"),
    "noise_std": ("degradation", "noise_std"),
    "quant_bits": ("degradation", "quant_bits"),
    "blur_radius": ("degradation", "blur_radius"),
}


def effective_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def _window(section: dict) -> WindowGeometry:
    return WindowGeometry(**section)


def _net_kwargs(section: dict) -> dict:
    kwargs = dict(section)
    kwargs["window"] = _window(kwargs["window"])
    kwargs["heads"] = tuple(kwargs["heads"])
    kwargs["roa_stages"] = tuple(kwargs["roa_stages"])
    return kwargs


def build_optimizer_config(cfg: dict) -> OptimizerConfig:
    section = dict(cfg["optimizer"])
    section["betas"] = tuple(section["betas"])
    return OptimizerConfig(**section)


def build_augmentation_config(cfg: dict) -> AugmentationConfig:
    section = dict(cfg["augmentation"])
    section["brightness"] = tuple(section["brightness"])
    section["saturation"] = tuple(section["saturation"])
    return AugmentationConfig(**section)


def build_lrnet_config(cfg: dict) -> LrNetConfig:
    return LrNetConfig(**_net_kwargs(cfg["lrnet"]))


def build_crnet_config(cfg: dict) -> CrNetConfig:
    return CrNetConfig(**_net_kwargs(cfg["crnet"]))


def build_degradation_config(cfg: dict) -> DegradationConfig:
    return DegradationConfig(**cfg["degradation"])


# --- runtime setup -----------------------------------------------------------


def _setup_runtime(args) -> None:
    workers = os.environ.get(WORKERS_ENV)
    if workers is not None:
        try:
            count = int(workers)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer, got {workers!r}")
        if count < 1:
            raise ValidationError(f"{WORKERS_ENV} must be >= 1, got {count}")
        torch.set_num_threads(count)
    if getattr(args, "deterministic", False):
        torch.manual_seed(args.seed)
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _write_run_config(run_dir: Path, cfg: dict) -> str:
    run_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (run_dir / "config.json").write_text(
        json.dumps({"hash": h, "config": cfg}, indent=2, sort_keys=True) + "\n"
    )
    return h


def _load_triplets(data_dir: str):
    return [load_triplet(p) for p in scan_dataset(data_dir)]


# --- commands ----------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    cfg = effective_config(args)
    if args.n < 1:
        raise ValidationError(f"--n must be >= 1, got {args.n}")
    if args.size < 8:
        raise ValidationError(f"--size must be >= 8, got {args.size}")
    out = Path(args.out)
    ids = generate_dataset(
        out,
        args.n,
        (args.size, args.size),
        build_degradation_config(cfg),
        seed=args.seed,
    )
    _write_run_config(out, cfg)
    print(f"wrote {len(ids)} triplets to {out}")
    return 0


def cmd_train_lrnet(args) -> int:
    cfg = effective_config(args)
    run_dir = Path(args.run_dir)
    full_hash = _write_run_config(run_dir, cfg)
    triplets = _load_triplets(args.data)
    opt_cfg = build_optimizer_config(cfg)
    net, pool, log = train_lrnet(
        triplets,
        opt_cfg,
        build_lrnet_config(cfg),
        build_augmentation_config(cfg),
        seed=args.seed,
        w_p=cfg["training"]["w_p"],
        snapshots=cfg["training"]["snapshots"],
        log_path=run_dir / "lrnet_log.tsv",
        log_every=cfg["training"]["log_every"],
    )
    net_hash = config_hash(cfg["lrnet"])
    save_module(run_dir / "lrnet.dswa", net, config_hash=net_hash, step=opt_cfg.total_steps)
    for entry in pool.entries:
        save_weights(
            run_dir / f"lrnet_snapshot_{entry.step:06d}.dswa",
            entry.blocks,
            config_hash=net_hash,
            step=entry.step,
        )
    print(f"run {full_hash}: {len(pool)} snapshots")
    print(f"final: {log.lines[-1]}")
    return 0


def _load_pool(run_dir: Path, expected_hash: str) -> CheckpointPool:
    snapshots = sorted(run_dir.glob("lrnet_snapshot_*.dswa"))
    entries = []
    for path in snapshots:
        archive = load_weights(path)
        if archive.config_hash != expected_hash:
            raise ValidationError(
                f"snapshot {path.name} was trained with config hash "
                f"{archive.config_hash!r}, expected {expected_hash!r}"
            )
        entries.append(PoolEntry(step=archive.step, blocks=archive.blocks))
    if not entries:
        raise ValidationError(f"no lrnet snapshots found in {run_dir}")
    return CheckpointPool(entries=entries)


def cmd_train_crnet(args) -> int:
    cfg = effective_config(args)
    run_dir = Path(args.run_dir)
    full_hash = _write_run_config(run_dir, cfg)
    triplets = _load_triplets(args.data)
    opt_cfg = build_optimizer_config(cfg)
    lrnet_hash = config_hash(cfg["lrnet"])
    lrnet_cfg = build_lrnet_config(cfg)

    pool = None
    fixed = None
    if args.lrnet_run is not None:
        pool = _load_pool(Path(args.lrnet_run), lrnet_hash)
    elif args.lrnet_weights is not None:
        fixed = LrNet(lrnet_cfg)
        load_module(args.lrnet_weights, fixed, expected_hash=lrnet_hash)
    else:
        raise ValidationError("need --lrnet-run (snapshot pool) or --lrnet-weights")

    net, log = train_crnet(
        triplets,
        pool,
        opt_cfg,
        build_crnet_config(cfg),
        build_augmentation_config(cfg),
        lrnet=fixed,
        lrnet_cfg=lrnet_cfg,
        seed=args.seed,
        w_p=cfg["training"]["w_p"],
        loss_space=cfg["training"]["loss_space"],
        log_path=run_dir / "crnet_log.tsv",
        log_every=cfg["training"]["log_every"],
    )
    save_module(
        run_dir / "crnet.dswa",
        net,
        config_hash=config_hash(cfg["crnet"]),
        step=opt_cfg.total_steps,
    )
    print(f"run {full_hash}")
    print(f"final: {log.lines[-1]}")
    return 0


def cmd_train_maskrefine(args) -> int:
    cfg = effective_config(args)
    run_dir = Path(args.run_dir)
    full_hash = _write_run_config(run_dir, cfg)
    triplets = _load_triplets(args.data)
    opt_cfg = build_optimizer_config(cfg)
    net, log = train_maskrefine(
        triplets,
        opt_cfg,
        MaskRefineConfig(**cfg["maskrefine"]),
        seed=args.seed,
        log_path=run_dir / "maskrefine_log.tsv",
        log_every=cfg["training"]["log_every"],
    )
    save_module(
        run_dir / "maskrefine.dswa",
        net,
        config_hash=config_hash(cfg["maskrefine"]),
        step=opt_cfg.total_steps,
    )
    print(f"run {full_hash}")
    print(f"final: {log.lines[-1]}")
    return 0


def _list_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise ValidationError(f"no images found in {path}")
        return files
    if not path.exists():
        raise OSError(f"input not found: {path}")
    return [path]


def cmd_infer(args) -> int:
    cfg = effective_config(args)
    inputs = _list_images(Path(args.input))
    mask_path = Path(args.mask)

    lrnet = LrNet(build_lrnet_config(cfg))
    load_module(args.lr_weights, lrnet, expected_hash=config_hash(cfg["lrnet"]))
    crnet = CrNet(build_crnet_config(cfg))
    load_module(args.cr_weights, crnet, expected_hash=config_hash(cfg["crnet"]))
    refiner = None
    if args.refine_mask is not None:
        refiner = MaskRefineNet(MaskRefineConfig(**cfg["maskrefine"]))
        load_module(
            args.refine_mask, refiner, expected_hash=config_hash(cfg["maskrefine"])
        )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for input_path in inputs:
        if mask_path.is_dir():
            candidates = [
                mask_path / f"{input_path.stem}{ext}" for ext in IMAGE_SUFFIXES
            ]
            found = [c for c in candidates if c.exists()]
            if not found:
                raise ValidationError(f"no mask for {input_path.name} in {mask_path}")
            this_mask = found[0]
        else:
            this_mask = mask_path
        img = load_image(input_path)
        mask = load_mask(this_mask)
        if refiner is not None:
            mask = refine_mask(img, mask, refiner)
        result = remove_shadow(img, mask, lrnet, crnet)
        save_image(out_dir / f"{input_path.stem}.png", result)
    print(f"wrote {len(inputs)} images to {out_dir}")
    return 0


def _stem_index(folder: Path) -> dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(folder.iterdir())
        if p.suffix.lower() in IMAGE_SUFFIXES
    }


def _mean_region(metrics: list[RegionMetrics | None]) -> RegionMetrics | None:
    present = [m for m in metrics if m is not None]
    if not present:
        return None
    return RegionMetrics(
        psnr=float(np.mean([m.psnr for m in present])),
        ssim=float(np.mean([m.ssim for m in present])),
        rmse_lab=float(np.mean([m.rmse_lab for m in present])),
        pixels=int(sum(m.pixels for m in present)),
    )


def cmd_eval(args) -> int:
    pred_dir, gt_dir, mask_dir = Path(args.pred), Path(args.gt), Path(args.mask)
    for d in (pred_dir, gt_dir, mask_dir):
        if not d.is_dir():
            raise OSError(f"not a directory: {d}")
    preds, gts, masks = _stem_index(pred_dir), _stem_index(gt_dir), _stem_index(mask_dir)
    problems = []
    problems += [
        f"prediction {s} has no ground truth" for s in sorted(preds.keys() - gts.keys())
    ]
    problems += [
        f"ground truth {s} has no prediction" for s in sorted(gts.keys() - preds.keys())
    ]
    problems += [
        f"prediction {s} has no mask" for s in sorted(preds.keys() - masks.keys())
    ]
    if problems:
        raise ValidationError("unpaired evaluation files", problems=problems)
    if not preds:
        raise ValidationError("no images to evaluate")

    reports = []
    for stem in sorted(preds):
        reports.append(
            evaluate(
                load_image(preds[stem]).data,
                load_image(gts[stem]).data,
                load_mask(masks[stem]),
            )
        )
    combined = RegionReport(
        s=_mean_region([r.s for r in reports]),
        ns=_mean_region([r.ns for r in reports]),
        all=_mean_region([r.all for r in reports]),
    )
    text = f"images: {len(reports)}\n" + combined.to_text()
    print(text)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_analyze_bias(args) -> int:
    cfg = effective_config(args)
    triplets = _load_triplets(args.data)
    pairs = [
        (t.shadow, t.gt, t.mask) for t in triplets if t.gt is not None
    ]
    if not pairs:
        raise ValidationError("dataset has no entries with ground truth")
    report = color_bias_analysis(pairs, bins=args.bins)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bias_histogram.tsv").write_text(report.to_text() + "\n")
    report.save_plot(out_dir / "bias_histogram.png")
    _write_run_config(out_dir, cfg)
    means = ", ".join(
        f"{c}={m:+.4f}" for c, m in zip(report.CHANNELS, report.mean)
    )
    print(f"mean shadow-region reflectance difference: {means}")
    print(f"wrote bias_histogram.tsv and bias_histogram.png to {out_dir}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deshadow", description="Shadow removal toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded, deterministic kernels, seeded",
    )

    train_common = argparse.ArgumentParser(add_help=False)
    train_common.add_argument("--data", required=True, help="dataset root")
    train_common.add_argument("--run-dir", required=True)
    train_common.add_argument("--steps", type=int, help="override optimizer.total_steps")
    train_common.add_argument("--batch", type=int)
    train_common.add_argument("--crop", type=int)
    train_common.add_argument("--lr-start", type=float, dest="lr_start")
    train_common.add_argument("--lr-end", type=float, dest="lr_end")
    train_common.add_argument("--w-p", type=float, dest="w_p")

    p = sub.add_parser("synth-gen", parents=[common], help="render synthetic triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--quant-bits", type=int, dest="quant_bits")
    p.add_argument("--blur-radius", type=float, dest="blur_radius")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-lrnet", parents=[common, train_common])
    p.add_argument("--snapshots", type=int, help="override training.snapshots")
    p.set_defaults(func=cmd_train_lrnet)

    p = sub.add_parser("train-crnet", parents=[common, train_common])
    p.add_argument("--lrnet-run", help="lrnet run dir; snapshots become the pool")
    p.add_argument("--lrnet-weights", help="single lrnet archive (no ensemble)")
    p.add_argument("--loss-space", choices=["rgb", "chroma"], dest="loss_space")
    p.set_defaults(func=cmd_train_crnet)

    p = sub.add_parser("train-maskrefine", parents=[common, train_common])
    p.set_defaults(func=cmd_train_maskrefine)

    p = sub.add_parser("infer", parents=[common])
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--mask", required=True, help="mask file or directory")
    p.add_argument("--lr-weights", required=True)
    p.add_argument("--cr-weights", required=True)
    p.add_argument("--refine-mask", help="mask refinement archive; refines masks first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", help="write the metric grid to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-bias", parents=[common])
    p.add_argument("--data", required=True, help="dataset root with gt")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.set_defaults(func=cmd_analyze_bias)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_runtime(args)
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
