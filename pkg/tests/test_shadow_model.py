import numpy as np
import pytest

from deshadow.colorspace import RgbImage, decouple
from deshadow.data_io import load_image, load_mask, scan_dataset
from deshadow.errors import ValidationError
from deshadow.formation import (
    BiasReport,
    DegradationConfig,
    Scene,
    apply_degradation,
    color_bias_analysis,
    generate_dataset,
    random_scene,
    render_lit,
    render_shadow,
    retinex_decompose,
)


def constant_scene(h=6, w=6, albedo=0.8, direct=0.6, ambient=0.4, a=0.5, mask=None):
    if mask is None:
        mask = np.zeros((h, w))
        mask[h // 2 :, :] = 1.0
    return Scene(
        albedo=np.full((h, w, 3), albedo),
        direct_shading=np.full((h, w, 3), direct),
        ambient_shading=np.full((h, w, 3), ambient),
        attenuation=np.full((h, w), a),
        shadow_mask=mask,
    )


class TestRender:
    def test_lit_ambient_only(self):
        s = constant_scene(albedo=0.5, direct=0.0, ambient=1.0)
        assert np.allclose(render_lit(s).data, 0.5)

    def test_lit_zero_albedo(self):
        s = constant_scene(albedo=0.0)
        assert np.all(render_lit(s).data == 0.0)

    def test_lit_hand_computed(self):
        s = constant_scene(albedo=0.8, direct=0.6, ambient=0.4)
        assert np.allclose(render_lit(s).data, 0.8)  # (0.6+0.4)*0.8

    def test_shadow_no_mask_equals_lit(self):
        s = constant_scene(mask=np.zeros((6, 6)))
        assert np.array_equal(render_shadow(s).data, render_lit(s).data)

    def test_shadow_equals_lit_when_direct_absent(self):
        s = constant_scene(direct=0.0, a=1.0, mask=np.ones((6, 6)))
        assert np.allclose(render_shadow(s).data, render_lit(s).data)

    def test_shadow_hand_computed(self):
        s = constant_scene(albedo=0.8, ambient=0.4, a=0.5, mask=np.ones((6, 6)))
        assert np.allclose(render_shadow(s).data, 0.16)  # 0.5*0.4*0.8

    def test_ratio_law(self):
        s = constant_scene(albedo=0.7, direct=0.55, ambient=0.35, a=0.4)
        lit = render_lit(s).data
        shadow = render_shadow(s).data
        inside = s.shadow_mask > 0.5
        ratio = shadow[inside] / lit[inside]
        assert np.allclose(ratio, 0.4 * 0.35 / 0.9, atol=1e-6)

    def test_shadow_never_brighter(self):
        rng = np.random.default_rng(0)
        scene = random_scene(rng, 24, 24)
        assert np.all(render_shadow(scene).data <= render_lit(scene).data + 1e-12)


class TestDegradation:
    def test_near_identity(self):
        rng = np.random.default_rng(1)
        img = RgbImage(rng.random((8, 8, 3)))
        cfg = DegradationConfig(noise_std=0.0, quant_bits=16, blur_radius=0.0)
        out = apply_degradation(img, cfg)
        assert np.max(np.abs(out.data - img.data)) <= 1.0 / (2**16 - 1)

    def test_one_bit_quantizer(self):
        rng = np.random.default_rng(2)
        img = RgbImage(rng.random((8, 8, 3)))
        out = apply_degradation(img, DegradationConfig(noise_std=0.0, quant_bits=1, blur_radius=0.0))
        assert set(np.unique(out.data)) <= {0.0, 1.0}

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        img = RgbImage(rng.random((8, 8, 3)))
        cfg = DegradationConfig(noise_std=0.05, seed=123)
        a = apply_degradation(img, cfg)
        b = apply_degradation(img, cfg)
        assert np.array_equal(a.data, b.data)

    def test_range_preserved(self):
        rng = np.random.default_rng(4)
        img = RgbImage(rng.random((8, 8, 3)))
        out = apply_degradation(img, DegradationConfig(noise_std=0.5, seed=5))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            DegradationConfig(noise_std=-1)
        with pytest.raises(ValidationError):
            DegradationConfig(quant_bits=0)
        with pytest.raises(ValidationError):
            DegradationConfig(quant_bits=17)


class TestRetinex:
    def test_uniform_gray(self):
        img = RgbImage(np.full((10, 10, 3), 0.6))
        pair = retinex_decompose(img)
        assert np.allclose(pair.illumination, 0.6, atol=1e-12)
        assert np.allclose(pair.reflectance, 1.0, atol=1e-9)

    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        img = RgbImage(0.1 + 0.9 * rng.random((12, 12, 3)))
        pair = retinex_decompose(img)
        rebuilt = pair.reflectance * pair.illumination[..., None]
        assert np.allclose(rebuilt, img.data, atol=1e-12)

    def test_black_image(self):
        img = RgbImage(np.zeros((6, 6, 3)))
        pair = retinex_decompose(img)
        assert np.allclose(pair.illumination, 1e-3)
        assert np.all(pair.reflectance == 0.0)

    def test_illumination_positive(self):
        rng = np.random.default_rng(6)
        img = RgbImage(rng.random((8, 8, 3)) * 0.01)
        assert retinex_decompose(img).illumination.min() > 0


class TestColorBias:
    def test_identical_pair_zero_bias(self):
        rng = np.random.default_rng(7)
        img = RgbImage(rng.random((16, 16, 3)))
        mask = np.ones((16, 16))
        report = color_bias_analysis([(img, img, mask)])
        assert np.allclose(report.mean, 0.0)
        assert np.allclose(report.median, 0.0)
        assert report.sample_count == 256

    def test_blue_ambient_biases_blue_channel(self):
        # blue-tinted ambient light: reflectance in shadow drifts blue-ward
        h = w = 48
        mask = np.zeros((h, w))
        mask[12:36, 12:36] = 1.0
        scene = Scene(
            albedo=np.full((h, w, 3), 0.8),
            direct_shading=np.full((h, w, 3), 0.6),
            ambient_shading=np.broadcast_to(
                np.array([0.15, 0.25, 0.38]), (h, w, 3)
            ).copy(),
            attenuation=np.full((h, w), 0.6),
            shadow_mask=mask,
        )
        report = color_bias_analysis(
            [(render_shadow(scene), render_lit(scene), mask)]
        )
        assert report.mean[2] > report.mean[0]
        assert report.sample_count == 24 * 24

    def test_empty_masks_rejected(self):
        img = RgbImage(np.full((4, 4, 3), 0.5))
        with pytest.raises(ValidationError):
            color_bias_analysis([(img, img, np.zeros((4, 4)))])

    def test_report_text_and_plot(self, tmp_path):
        rng = np.random.default_rng(8)
        a = RgbImage(rng.random((8, 8, 3)))
        b = RgbImage(rng.random((8, 8, 3)))
        report = color_bias_analysis([(a, b, np.ones((8, 8)))], bins=16)
        text = report.to_text()
        assert text.splitlines()[0] == "channel\tbin_left\tbin_right\tcount"
        assert len([l for l in text.splitlines() if l.startswith("B\t")]) == 16
        report.save_plot(tmp_path / "bias.png")
        assert (tmp_path / "bias.png").stat().st_size > 0

    def test_histogram_counts_cover_samples(self):
        rng = np.random.default_rng(9)
        a = RgbImage(rng.random((8, 8, 3)))
        b = RgbImage(rng.random((8, 8, 3)))
        report = color_bias_analysis([(a, b, np.ones((8, 8)))])
        assert report.counts.shape == (3, 64)
        assert np.all(report.counts.sum(axis=1) == report.sample_count)


class TestGenerateDataset:
    def test_deterministic_bytes(self, tmp_path):
        generate_dataset(tmp_path / "a", n=3, size=(24, 24), seed=42)
        generate_dataset(tmp_path / "b", n=3, size=(24, 24), seed=42)
        for sub in ("input", "mask", "gt"):
            for f in sorted((tmp_path / "a" / sub).iterdir()):
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()

    def test_prefix_stability(self, tmp_path):
        # the first triplets don't depend on how many follow
        generate_dataset(tmp_path / "a", n=2, size=(24, 24), seed=1)
        generate_dataset(tmp_path / "b", n=4, size=(24, 24), seed=1)
        f = "syn_0000.png"
        assert (tmp_path / "a" / "input" / f).read_bytes() == (
            tmp_path / "b" / "input" / f
        ).read_bytes()

    def test_layout_scannable_and_shadow_darker(self, tmp_path):
        generate_dataset(tmp_path / "d", n=4, size=(32, 32), seed=7)
        triplets = scan_dataset(tmp_path / "d")
        assert len(triplets) == 4
        for t in triplets:
            shadow = load_image(t.shadow)
            gt = load_image(t.gt)
            mask = load_mask(t.mask) > 0.5
            assert mask.any() and not mask.all()
            luma_s, _ = decouple(shadow)
            luma_g, _ = decouple(gt)
            assert luma_s.data[mask].mean() < luma_g.data[mask].mean()

    def test_gt_regenerable_from_seed(self, tmp_path):
        generate_dataset(tmp_path / "d", n=2, size=(24, 24), seed=11)
        children = np.random.SeedSequence(11).spawn(2)
        scene = random_scene(np.random.default_rng(children[1]), 24, 24)
        stored = load_image(tmp_path / "d" / "gt" / "syn_0001.png")
        expected = np.clip(np.round(render_lit(scene).data * 255), 0, 255) / 255
        assert np.array_equal(stored.data, expected)

    def test_invalid_args(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_dataset(tmp_path, n=0, size=(24, 24))
        with pytest.raises(ValidationError):
            generate_dataset(tmp_path, n=1, size=(4, 4))


def test_scene_validation():
    with pytest.raises(ValidationError):
        constant_scene(a=1.5)
    with pytest.raises(ValidationError):
        Scene(
            albedo=np.zeros((4, 4, 3)),
            direct_shading=np.zeros((4, 4, 3)),
            ambient_shading=np.zeros((4, 4, 3)),
            attenuation=np.zeros((4, 4)),
            shadow_mask=np.full((4, 4), 0.5),
        )
