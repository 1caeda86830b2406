"""Release gate: one test per shipped guarantee, slow end-to-end runs included.

Each test prints a single ``[NN] PASS/FAIL`` verdict line with measured
numbers, so a ``pytest -v`` transcript doubles as the release report.
The overfit fixture trains both restoration networks for 2,000 steps on
a tiny synthetic set and is shared by the training-related checks;
expect the full module to take on the order of half an hour on one CPU
core.
"""

import json
import math
import time
from statistics import mean

import numpy as np
import pytest
import torch

from test_attention import ref_plain_window_attention, zero_rectification
from test_metrics import ref_lab, ref_ssim

from deshadow.archive import apply_blocks
from deshadow.attention import (
    LocalRangeBlock,
    MultiheadTransposedAttention,
    RectifiedOutreachAttention,
    WindowGeometry,
    lambda_value,
)
from deshadow.cli import main as cli_main
from deshadow.colorspace import RgbImage, decouple, decouple_tensor, recouple
from deshadow.crnet import ColorInjection, CrNet, CrNetConfig, remove_shadow
from deshadow.data_io import load_triplet, scan_dataset
from deshadow.formation import Scene, generate_dataset, render_lit, render_shadow
from deshadow.lrnet import LrNet, LrNetConfig
from deshadow.mask_refine import corrupt_mask, iou, refine_mask
from deshadow.metrics import mse, psnr, rmse_lab, ssim
from deshadow.training import (
    OptimizerConfig,
    no_augmentation,
    train_crnet,
    train_lrnet,
    train_maskrefine,
)

# Networks sized for a single CPU core; the optimizer settings (2,000
# steps, 96 crops, batch 4) are the library defaults.
ACC_LR = LrNetConfig(base_dim=8, blocks_per_stage=1, heads=(1, 2, 2, 4))
ACC_CR = CrNetConfig(base_dim=8, blocks_per_stage=1, heads=(1, 2, 2, 4))


def report(num: int, ok: bool, label: str, detail: str = "") -> None:
    line = f"[{num:2d}] {'PASS' if ok else 'FAIL'} {label}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("gate") / "overfit"
    generate_dataset(root, 8, (96, 96), seed=7)
    return [load_triplet(p) for p in scan_dataset(root)]


@pytest.fixture(scope="module")
def overfit_models(overfit_data):
    start = time.perf_counter()
    lrnet, pool, _ = train_lrnet(
        overfit_data, OptimizerConfig(), ACC_LR, no_augmentation(),
        seed=7, w_p=0.0,
    )
    crnet, _ = train_crnet(
        overfit_data, pool, OptimizerConfig(), ACC_CR, no_augmentation(),
        lrnet_cfg=ACC_LR, seed=7, w_p=0.0,
    )
    return lrnet, crnet, time.perf_counter() - start


def test_01_color_round_trip():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        img = RgbImage(rng.random((32, 32, 3)))
        back = recouple(*decouple(img))
        worst = max(worst, float(np.abs(back.data - img.data).max()))
    elapsed = time.perf_counter() - start
    report(
        1, worst <= 1e-6 and elapsed < 5.0,
        "luminance/color split inverts exactly",
        f"1000 images, max err {worst:.2e}, {elapsed:.2f}s",
    )


def test_02_attention_laws():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        m = int(rng.choice([4, 8]))
        gamma = float(rng.choice([0.0, 0.5]))
        dil = int(rng.choice([1, 2]))
        heads = int(rng.choice([1, 2]))
        torch.manual_seed(int(rng.integers(0, 2**31)))
        module = RectifiedOutreachAttention(
            8, 4, heads, WindowGeometry(m, gamma, dil)
        )
        x = torch.randn(1, 8, 2 * m, 2 * m)
        ctx = torch.randn(1, 4, 2 * m, 2 * m)
        with torch.no_grad():
            maps = module.attention_maps(x, ctx)
        ones = torch.ones_like(maps.att1.sum(-1))
        lam = maps.rectification.view(1, 1, -1, 1)
        rect_sum = (maps.att1 - lam.unsqueeze(-1) * maps.att2).sum(-1)
        worst = max(
            worst,
            float((maps.att1.sum(-1) - ones).abs().max()),
            float((maps.att2.sum(-1) - ones).abs().max()),
            float((rect_sum - (1.0 - lam)).abs().max()),
        )

    torch.manual_seed(5)
    degen = RectifiedOutreachAttention(8, 0, 2, WindowGeometry(4, 0.0, 1))
    zero_rectification(degen)
    x = torch.randn(1, 8, 8, 8)
    with torch.no_grad():
        got = degen(x)
    plain_err = float((got - ref_plain_window_attention(degen, x)).abs().max())
    report(
        2, worst <= 1e-5 and plain_err <= 1e-5,
        "attention rows are stochastic; degenerate case = plain windows",
        f"100 configs, worst row-sum err {worst:.2e}, plain-window err {plain_err:.2e}",
    )


def _fd_gradient_error(fn, *inputs, h=1e-3):
    """Norm-relative gap between central differences and autograd."""
    leaves = [t.clone().requires_grad_(True) for t in inputs]
    auto = torch.autograd.grad(fn(*leaves), leaves)
    worst = 0.0
    for which in range(len(inputs)):
        work = [t.clone() for t in inputs]
        flat = work[which].reshape(-1)
        fd = torch.zeros_like(flat)
        with torch.no_grad():
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + h
                f_plus = float(fn(*work))
                flat[idx] = orig - h
                f_minus = float(fn(*work))
                flat[idx] = orig
                fd[idx] = (f_plus - f_minus) / (2.0 * h)
        gap = (fd - auto[which].reshape(-1)).norm()
        scale = max(float(auto[which].norm()), 1e-12)
        worst = max(worst, float(gap) / scale)
    return worst


def test_03_gradient_oracle():
    start = time.perf_counter()
    torch.manual_seed(31)
    geo = WindowGeometry(4, 0.5, 1)
    roa = RectifiedOutreachAttention(4, 4, 2, geo).double()
    mta = MultiheadTransposedAttention(4, 2).double()
    lrb = LocalRangeBlock(4).double()
    inj = ColorInjection(4, 4, 2, window_size=4).double()

    gen = torch.Generator().manual_seed(17)

    def rand():
        return torch.randn(1, 4, 8, 8, dtype=torch.float64, generator=gen)

    probes = {}

    def probed(name, module, *inputs):
        out = module(*inputs)
        if name not in probes:
            probes[name] = torch.randn(
                out.shape, dtype=torch.float64, generator=gen
            )
        return (out * probes[name]).sum()

    errors = {
        "roa": _fd_gradient_error(
            lambda a, b: probed("roa", roa, a, b), rand(), rand()
        ),
        "mta": _fd_gradient_error(lambda a: probed("mta", mta, a), rand()),
        "lrb": _fd_gradient_error(lambda a: probed("lrb", lrb, a), rand()),
        "inject": _fd_gradient_error(
            lambda a, b: probed("inject", inj, a, b), rand(), rand()
        ),
    }
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(
        3, worst <= 1e-3 and elapsed < 120.0,
        "finite differences confirm analytic gradients",
        f"{detail}; {elapsed:.1f}s",
    )


def test_04_rectification_weight_values():
    lam0, _ = lambda_value(0.0, 0.0, 0.0, 0.0, 0.7)
    lam1, _ = lambda_value(1.0, 1.0, 0.0, 0.0, 0.7)
    exact = float(lam0) == 0.7
    close = abs(float(lam1) - (math.e - 1.0 + 0.7)) <= 1e-9
    report(
        4, exact and close,
        "rectification weight evaluates exactly",
        f"zero-params -> {float(lam0)!r}, unit-product err "
        f"{abs(float(lam1) - (math.e - 1.0 + 0.7)):.1e}",
    )


def test_05_physical_model_consistency():
    rng = np.random.default_rng(55)
    worst_ratio = 0.0
    ordered = True
    for _ in range(25):
        albedo = float(rng.uniform(0.2, 0.9))
        sd = float(rng.uniform(0.2, 0.7))
        sa = float(rng.uniform(0.05, 0.5))
        if (sd + sa) * albedo > 1.0:  # keep clipping out of the picture
            scale = 1.0 / ((sd + sa) * albedo)
            sd, sa = sd * scale, sa * scale
        att = float(rng.uniform(0.3, 1.0))
        mask = np.zeros((12, 12))
        mask[3:9, 2:10] = 1.0
        scene = Scene(
            albedo=np.full((12, 12, 3), albedo),
            direct_shading=np.full((12, 12, 3), sd),
            ambient_shading=np.full((12, 12, 3), sa),
            attenuation=np.full((12, 12), att),
            shadow_mask=mask,
        )
        lit = render_lit(scene).data
        shaded = render_shadow(scene).data
        inside = mask.astype(bool)
        ratio = shaded[inside] / lit[inside]
        worst_ratio = max(
            worst_ratio, float(np.abs(ratio - att * sa / (sd + sa)).max())
        )
        ordered = ordered and bool(np.all(shaded <= lit + 1e-12))
    report(
        5, worst_ratio <= 1e-6 and ordered,
        "shadow/lit ratio follows the illumination model",
        f"25 constant scenes, worst ratio err {worst_ratio:.2e}",
    )


def test_06_metric_oracles():
    rng = np.random.default_rng(6)
    a = rng.random((8, 8, 3))
    b = np.clip(a + rng.normal(0.0, 0.05, a.shape), 0.0, 1.0)

    ref_psnr = 10.0 * np.log10(1.0 / np.mean((a - b) ** 2))
    psnr_err = abs(psnr(a, b) - ref_psnr)

    ssim_ref = np.mean(
        [ref_ssim(a[..., c], b[..., c]) for c in range(3)], axis=0
    ).mean()
    ssim_err = abs(ssim(a, b) - ssim_ref)

    total = 0.0
    for i in range(8):
        for j in range(8):
            la, lb = ref_lab(a[i, j]), ref_lab(b[i, j])
            total += sum(abs(la[c] - lb[c]) for c in range(3))
    lab_err = abs(rmse_lab(a, b) - total / (64 * 3))

    shifted = np.clip(a * 0.8, 0.0, 1.0)
    offset_err = abs(psnr(shifted, shifted + 0.1) - 20.0)

    region = rng.random((8, 8)) > 0.4
    n_s, n_ns = int(region.sum()), int((~region).sum())
    combined = (mse(a, b, region) * n_s + mse(a, b, ~region) * n_ns) / 64
    additivity_err = abs(combined - mse(a, b))

    ok = (
        psnr_err <= 1e-6 and ssim_err <= 1e-6 and lab_err <= 1e-6
        and offset_err <= 1e-6 and additivity_err <= 1e-9
    )
    report(
        6, ok,
        "metrics match brute-force references",
        f"psnr {psnr_err:.1e}, ssim {ssim_err:.1e}, lab {lab_err:.1e}, "
        f"+0.1 offset {offset_err:.1e}, additivity {additivity_err:.1e}",
    )


def test_07_identity_at_init():
    torch.manual_seed(7)
    lrnet = LrNet(ACC_LR)
    crnet = CrNet(ACC_CR)
    rng = np.random.default_rng(71)
    img = RgbImage(rng.random((40, 56, 3)))
    mask = np.zeros((40, 56))
    mask[8:30, 10:40] = 1.0

    rgb = torch.from_numpy(img.data.astype(np.float32)).permute(2, 0, 1)[None]
    luma, chroma = decouple_tensor(rgb)
    mask_t = torch.from_numpy(mask.astype(np.float32))[None, None]
    with torch.no_grad():
        luma_err = float((lrnet(luma, chroma, mask_t) - luma).abs().max())
        chroma_err = float((crnet(luma, chroma, mask_t) - chroma).abs().max())
    restored = remove_shadow(img, mask, lrnet, crnet)
    pipe_err = float(np.abs(restored.data - img.data).max())
    ok = luma_err <= 1e-6 and chroma_err <= 1e-6 and pipe_err <= 1e-6
    report(
        7, ok,
        "zero-initialized heads give exact identities",
        f"luma {luma_err:.1e}, chroma {chroma_err:.1e}, pipeline {pipe_err:.1e}",
    )


def test_08_overfit_smoke(overfit_data, overfit_models):
    lrnet, crnet, train_time = overfit_models
    before, after, err_in, err_out = [], [], [], []
    for t in overfit_data:
        out = remove_shadow(t.shadow, t.mask, lrnet, crnet)
        region = t.mask > 0.5
        before.append(psnr(t.shadow.data, t.gt.data))
        after.append(psnr(out.data, t.gt.data))
        err_in.append(rmse_lab(t.shadow.data, t.gt.data, region))
        err_out.append(rmse_lab(out.data, t.gt.data, region))
    gain = mean(after) - mean(before)
    ratio = mean(err_out) / mean(err_in)
    report(
        8, gain >= 10.0 and ratio <= 0.40,
        "2,000-step overfit restores the training set",
        f"PSNR {mean(before):.2f} -> {mean(after):.2f} dB (gain {gain:.2f}), "
        f"masked color err ratio {ratio:.1%}, trained in {train_time / 60:.1f} min",
    )


def test_09_checkpoint_ensemble_contract(overfit_data):
    opt = OptimizerConfig(total_steps=30, crop=64, batch=2)
    _, pool, _ = train_lrnet(
        overfit_data, opt, ACC_LR, no_augmentation(),
        seed=21, w_p=0.0, snapshots=1,
    )
    assert len(pool) == 1

    cr_pool, log_pool = train_crnet(
        overfit_data, pool, opt, ACC_CR, no_augmentation(),
        lrnet_cfg=ACC_LR, seed=22, w_p=0.0,
    )
    fixed = LrNet(ACC_LR)
    apply_blocks(fixed, pool.entries[0].blocks)
    cr_fixed, log_fixed = train_crnet(
        overfit_data, None, opt, ACC_CR, no_augmentation(),
        lrnet=fixed, seed=22, w_p=0.0,
    )

    state_pool = cr_pool.state_dict()
    state_fixed = cr_fixed.state_dict()
    bit_exact = set(state_pool) == set(state_fixed) and all(
        torch.equal(state_pool[k], state_fixed[k]) for k in state_pool
    )
    logs_equal = log_pool.lines == log_fixed.lines
    grads_clean = all(p.grad is None for p in fixed.parameters())
    report(
        9, bit_exact and logs_equal and grads_clean,
        "pool-of-1 training == fixed-restorer training, restorer untouched",
        f"weights bit-exact: {bit_exact}, logs equal: {logs_equal}, "
        f"restorer grads absent: {grads_clean}",
    )


def test_10_mask_refinement_gain(overfit_data):
    net, _ = train_maskrefine(
        overfit_data, OptimizerConfig(total_steps=1000, crop=96, batch=4),
        seed=31,
    )
    rng = np.random.default_rng(97)  # held-out corruption stream
    dirty_scores, refined_scores = [], []
    for t in overfit_data:
        for _ in range(2):
            dirty = corrupt_mask(t.mask, rng)
            refined = refine_mask(t.shadow, dirty, net)
            dirty_scores.append(iou(dirty, t.mask))
            refined_scores.append(iou(refined, t.mask))
    gain = mean(refined_scores) - mean(dirty_scores)
    report(
        10, mean(refined_scores) > mean(dirty_scores),
        "refinement beats the corrupted masks it was given",
        f"IoU {mean(dirty_scores):.3f} -> {mean(refined_scores):.3f} "
        f"(+{gain:.3f}, 16 held-out corruptions)",
    )


CLI_CFG = {
    "optimizer": {"total_steps": 4, "crop": 32, "batch": 1},
    "lrnet": {"base_dim": 8, "blocks_per_stage": 1, "heads": [1, 2, 2, 4]},
    "crnet": {"base_dim": 8, "blocks_per_stage": 1, "heads": [1, 2, 2, 4]},
    "maskrefine": {"base_dim": 8},
    "training": {"w_p": 0.0, "snapshots": 2, "log_every": 1},
    "augmentation": {"mixup_prob": 0.0},
}


def test_11_cli_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(CLI_CFG))
    failures = []

    def run_pair(name, build_argv):
        dirs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            rc = cli_main(build_argv(str(out)))
            if rc != 0:
                failures.append(f"{name} exited {rc}")
                return None
            dirs.append(out)
        first, second = dirs
        rel_a = sorted(
            p.relative_to(first).as_posix()
            for p in first.rglob("*") if p.is_file()
        )
        rel_b = sorted(
            p.relative_to(second).as_posix()
            for p in second.rglob("*") if p.is_file()
        )
        if rel_a != rel_b:
            failures.append(f"{name} produced different file sets")
            return first
        diff = [
            f for f in rel_a
            if (first / f).read_bytes() != (second / f).read_bytes()
        ]
        if diff:
            failures.append(f"{name} differs: {', '.join(diff)}")
        return first

    common = ["--config", str(cfg), "--seed", "9", "--deterministic"]
    data = run_pair(
        "synth-gen",
        lambda o: ["synth-gen", *common, "--out", o, "--n", "2", "--size", "32"],
    )
    assert data is not None
    lr_run = run_pair(
        "train-lrnet",
        lambda o: ["train-lrnet", *common, "--data", str(data), "--run-dir", o],
    )
    assert lr_run is not None
    cr_run = run_pair(
        "train-crnet",
        lambda o: [
            "train-crnet", *common, "--data", str(data), "--run-dir", o,
            "--lrnet-run", str(lr_run),
        ],
    )
    assert cr_run is not None
    mask_run = run_pair(
        "train-maskrefine",
        lambda o: ["train-maskrefine", *common, "--data", str(data), "--run-dir", o],
    )
    assert mask_run is not None
    run_pair(
        "infer",
        lambda o: [
            "infer", *common,
            "--input", str(data / "input"), "--mask", str(data / "mask"),
            "--lr-weights", str(lr_run / "lrnet.dswa"),
            "--cr-weights", str(cr_run / "crnet.dswa"),
            "--refine-mask", str(mask_run / "maskrefine.dswa"),
            "--out", o,
        ],
    )

    eval_outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"eval-{tag}.txt"
        rc = cli_main([
            "eval", *common,
            "--pred", str(data / "gt"), "--gt", str(data / "gt"),
            "--mask", str(data / "mask"), "--out", str(out),
        ])
        if rc != 0:
            failures.append(f"eval exited {rc}")
        else:
            eval_outs.append(out)
    if len(eval_outs) == 2 and eval_outs[0].read_bytes() != eval_outs[1].read_bytes():
        failures.append("eval differs")

    run_pair(
        "analyze-bias",
        lambda o: ["analyze-bias", *common, "--data", str(data), "--out", o],
    )

    report(
        11, not failures,
        "every command reproduces byte-identical artifacts",
        "7 commands rerun" if not failures else "; ".join(failures),
    )
