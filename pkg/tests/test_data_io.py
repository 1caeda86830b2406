import numpy as np
import pytest
from PIL import Image

from deshadow.colorspace import RgbImage
from deshadow.data_io import (
    Triplet,
    load_image,
    load_mask,
    load_triplet,
    read_manifest,
    save_image,
    save_mask,
    scan_dataset,
)
from deshadow.errors import ValidationError


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def make_dataset(root, ids, with_gt=True, skip_masks=()):
    rng = np.random.default_rng(0)
    for i in ids:
        img = rng.integers(0, 256, (12, 16, 3), dtype=np.uint8)
        write_png(root / "input" / f"{i}.png", img)
        if i not in skip_masks:
            mask = (rng.random((12, 16)) > 0.5).astype(np.uint8) * 255
            write_png(root / "mask" / f"{i}.png", mask)
        if with_gt:
            write_png(root / "gt" / f"{i}.png", img)


class TestScan:
    def test_empty_root(self, tmp_path):
        assert scan_dataset(tmp_path) == []

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_dataset(tmp_path / "nope")

    def test_ordering_is_lexicographic(self, tmp_path):
        make_dataset(tmp_path, ["b2", "a10", "a2", "zz"])
        got = [t.id for t in scan_dataset(tmp_path)]
        assert got == ["a10", "a2", "b2", "zz"]

    def test_well_formed_triplets(self, tmp_path):
        make_dataset(tmp_path, ["x1", "x2", "x3", "x4"])
        triplets = scan_dataset(tmp_path)
        assert len(triplets) == 4
        assert all(t.gt is not None for t in triplets)

    def test_missing_gt_is_absent_not_error(self, tmp_path):
        make_dataset(tmp_path, ["a", "b"], with_gt=False)
        triplets = scan_dataset(tmp_path)
        assert all(t.gt is None for t in triplets)

    def test_missing_mask_is_error_naming_file(self, tmp_path):
        make_dataset(tmp_path, ["a", "b", "c"], skip_masks={"b"})
        with pytest.raises(ValidationError) as exc:
            scan_dataset(tmp_path)
        assert any("b" in p for p in exc.value.problems)

    def test_manifest_restricts_and_orders(self, tmp_path):
        make_dataset(tmp_path, ["a", "b", "c", "d"])
        (tmp_path / "split.txt").write_text("c\n\n# comment\na\n")
        got = [t.id for t in scan_dataset(tmp_path, tmp_path / "split.txt")]
        assert got == ["a", "c"]

    def test_manifest_unknown_id_rejected(self, tmp_path):
        make_dataset(tmp_path, ["a"])
        (tmp_path / "split.txt").write_text("a\nmissing\n")
        with pytest.raises(ValidationError):
            scan_dataset(tmp_path, tmp_path / "split.txt")


class TestImageIo:
    def test_pure_white(self, tmp_path):
        write_png(tmp_path / "w.png", np.full((4, 4, 3), 255, dtype=np.uint8))
        img = load_image(tmp_path / "w.png")
        assert np.all(img.data == 1.0)

    def test_round_trip_exact_for_8bit(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
        img = RgbImage(arr / 255.0)
        save_image(tmp_path / "r.png", img)
        again = load_image(tmp_path / "r.png")
        assert np.array_equal(again.data, img.data)

    def test_mask_binarized(self, tmp_path):
        arr = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        write_png(tmp_path / "m.png", arr)
        mask = load_mask(tmp_path / "m.png")
        assert np.array_equal(mask, [[0.0, 1.0], [1.0, 0.0]])

    def test_mask_threshold_127(self, tmp_path):
        arr = np.array([[127, 128]], dtype=np.uint8)
        write_png(tmp_path / "m.png", arr)
        assert np.array_equal(load_mask(tmp_path / "m.png"), [[0.0, 1.0]])

    def test_mask_round_trip(self, tmp_path):
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        save_mask(tmp_path / "m.png", mask)
        assert np.array_equal(load_mask(tmp_path / "m.png"), mask)

    def test_unreadable_file_is_io_error(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(OSError):
            load_image(bad)


class TestTriplet:
    def test_load(self, tmp_path):
        make_dataset(tmp_path, ["t"])
        t = load_triplet(scan_dataset(tmp_path)[0])
        assert t.shadow.data.shape == (12, 16, 3)
        assert t.mask.shape == (12, 16)
        assert set(np.unique(t.mask)) <= {0.0, 1.0}

    def test_shape_mismatch_rejected(self):
        img = RgbImage(np.zeros((4, 4, 3)))
        with pytest.raises(ValidationError):
            Triplet(id="x", shadow=img, mask=np.zeros((5, 5)), gt=None)


def test_manifest_parser(tmp_path):
    f = tmp_path / "m.txt"
    f.write_text("# header\none\n\ntwo  \n")
    assert read_manifest(f) == ["one", "two"]
