"""Dataset loading, RLE codec, synthetic generation, checkpoint persistence."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectforge.data import (
    CheckpointError,
    DatasetError,
    DatasetRecord,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    mask_to_boxes,
    rle_decode,
    rle_encode,
    save_checkpoint,
    write_image,
    write_mask,
    write_synthetic_dataset,
)
from defectforge.tensor import Tensor

RNG = np.random.default_rng(31)


class TestRle:
    def test_first_column_of_4x2(self):
        # column-major: "1 4" fills rows 0..3 of column 0
        mask = rle_decode("1 4", 4, 2)
        np.testing.assert_array_equal(mask[:, 0], True)
        np.testing.assert_array_equal(mask[:, 1], False)

    def test_empty_encoding_is_blank(self):
        assert rle_decode("", 3, 3).sum() == 0
        assert rle_encode(np.zeros((3, 3), dtype=bool)) == ""

    def test_full_mask(self):
        assert rle_encode(np.ones((2, 2), dtype=bool)) == "1 4"

    def test_roundtrip_random(self):
        for _ in range(100):
            mask = RNG.random((13, 9)) < 0.3
            assert (rle_decode(rle_encode(mask), 13, 9) == mask).all()

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, h, w, seed):
        mask = np.random.default_rng(seed).random((h, w)) < 0.4
        assert (rle_decode(rle_encode(mask), h, w) == mask).all()

    def test_rejects_odd_token_count(self):
        with pytest.raises(DatasetError, match="pairs"):
            rle_decode("1 2 3", 4, 4)

    def test_rejects_non_increasing_starts(self):
        with pytest.raises(DatasetError, match="increasing"):
            rle_decode("5 2 3 1", 4, 4)

    def test_rejects_overlap(self):
        with pytest.raises(DatasetError, match="overlap"):
            rle_decode("1 4 3 2", 4, 4)

    def test_rejects_out_of_bounds(self):
        with pytest.raises(DatasetError, match="exceeds"):
            rle_decode("15 5", 4, 4)

    def test_rejects_non_integer(self):
        with pytest.raises(DatasetError, match="non-integer"):
            rle_decode("1 x", 4, 4)

    def test_rejects_zero_run(self):
        with pytest.raises(DatasetError, match="positive"):
            rle_decode("1 0", 4, 4)


class TestMaskToBoxes:
    def test_two_separate_components(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:5, 2:6] = True
        mask[10:15, 12:18] = True
        boxes = mask_to_boxes(mask)
        assert len(boxes) == 2
        assert boxes[0].as_tuple() == (2.0, 2.0, 6.0, 5.0)
        assert boxes[1].as_tuple() == (12.0, 10.0, 18.0, 15.0)

    def test_diagonal_pixels_are_one_component(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = mask[1, 1] = True  # 8-connectivity joins diagonals
        assert len(mask_to_boxes(mask)) == 1

    def test_empty_mask(self):
        assert mask_to_boxes(np.zeros((5, 5), dtype=bool)) == []


class TestSynthetic:
    def test_deterministic_for_seed(self):
        spec = SyntheticSpec(image_size=(64, 64), seed=7)
        a = generate_synthetic(spec, 3)
        b = generate_synthetic(spec, 3)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.mask, rb.mask)

    def test_area_fraction_within_tolerance(self):
        spec = SyntheticSpec(image_size=(128, 128), area_fraction=0.05, seed=3)
        records = generate_synthetic(spec, 20)
        for rec in records:
            assert rec.defect_fraction == pytest.approx(0.05, rel=0.20), rec.name

    def test_zero_count_range_yields_blank_masks(self):
        spec = SyntheticSpec(image_size=(64, 64), defect_count=(0, 0), seed=1)
        records = generate_synthetic(spec, 3)
        assert all(not r.has_defect for r in records)
        assert all(r.boxes == [] for r in records)

    def test_infeasible_fraction_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            SyntheticSpec(area_fraction=0.95)

    def test_unknown_shape_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            SyntheticSpec(shapes=("rectangle", "vortex"))

    def test_boxes_cover_mask(self):
        spec = SyntheticSpec(image_size=(96, 96), seed=11)
        for rec in generate_synthetic(spec, 5):
            cover = np.zeros_like(rec.mask)
            for b in rec.boxes:
                cover[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)] = True
            assert (cover | ~rec.mask).all(), "mask pixel outside every box"

    def test_defect_pixels_contrast_with_background(self):
        spec = SyntheticSpec(image_size=(96, 96), seed=13, contrast=0.45)
        rec = generate_synthetic(spec, 1)[0]
        assert rec.has_defect
        gray = rec.image[:, :, 0].astype(float) / 255.0
        gap = abs(gray[rec.mask].mean() - gray[~rec.mask].mean())
        assert gap > 0.2


class TestDatasetLayouts:
    def make_png_pair(self, tmp_path, folder, stem, size=(24, 24)):
        d = tmp_path / folder
        d.mkdir(parents=True, exist_ok=True)
        img = RNG.integers(0, 255, size=(*size, 3), dtype=np.uint8)
        mask = np.zeros(size, dtype=bool)
        mask[4:9, 5:12] = True
        write_image(d / f"{stem}.png", img)
        write_mask(d / f"{stem}_label.png", mask)
        return img, mask

    def test_paired_label_layout(self, tmp_path):
        self.make_png_pair(tmp_path, "part1", "item0")
        self.make_png_pair(tmp_path, "part1", "item1")
        records = load_dataset(tmp_path, "kolektor")
        assert [r.name for r in records] == ["part1/item0", "part1/item1"]
        assert all(r.has_defect for r in records)
        assert all(len(r.boxes) == 1 for r in records)

    def test_paired_layout_missing_mask_is_error(self, tmp_path):
        d = tmp_path / "part1"
        d.mkdir()
        write_image(d / "orphan.png", np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(DatasetError, match="missing mask"):
            load_dataset(tmp_path, "kolektor")

    def test_csv_layout(self, tmp_path):
        img_dir = tmp_path / "images"
        img_dir.mkdir()
        write_image(img_dir / "a.png", np.zeros((6, 4, 3), dtype=np.uint8))
        write_image(img_dir / "b.png", np.zeros((6, 4, 3), dtype=np.uint8))
        (tmp_path / "annotations.csv").write_text(
            "ImageId,ClassId,EncodedPixels\na.png,1,1 6\na.png,2,13 3\nb.png,1,\n"
        )
        records = load_dataset(tmp_path, "severstal")
        by_name = {r.name: r for r in records}
        assert by_name["a.png".removesuffix(".png")].mask[:, 0].all()
        assert by_name["a"].mask[0:3, 2].all()  # second run, second class merged in
        assert not by_name["b"].has_defect

    def test_folder_layout(self, tmp_path):
        (tmp_path / "normal").mkdir()
        write_image(tmp_path / "normal" / "ok0.png", np.zeros((10, 10, 3), dtype=np.uint8))
        (tmp_path / "defect").mkdir()
        (tmp_path / "defect_masks").mkdir()
        write_image(tmp_path / "defect" / "bad0.png", np.zeros((10, 10, 3), dtype=np.uint8))
        m = np.zeros((10, 10), dtype=bool)
        m[1:4, 1:4] = True
        write_mask(tmp_path / "defect_masks" / "bad0.png", m)
        records = load_dataset(tmp_path, "cplid")
        names = sorted(r.name for r in records)
        assert names == ["defect/bad0", "normal/ok0"]
        assert {r.name: r.has_defect for r in records} == {
            "normal/ok0": False, "defect/bad0": True}

    def test_synthetic_roundtrip_through_disk(self, tmp_path):
        spec = SyntheticSpec(image_size=(48, 48), seed=5)
        records = generate_synthetic(spec, 4)
        manifest = write_synthetic_dataset(records, tmp_path, spec)
        assert manifest["count"] == 4
        assert (tmp_path / "manifest.json").exists()
        loaded = load_dataset(tmp_path, "synthetic")
        assert len(loaded) == 4
        for orig, back in zip(records, loaded):
            np.testing.assert_array_equal(orig.image, back.image)
            np.testing.assert_array_equal(orig.mask, back.mask)

    def test_unknown_layout(self, tmp_path):
        with pytest.raises(DatasetError, match="unknown layout"):
            load_dataset(tmp_path, "voc")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError, match="does not exist"):
            load_dataset(tmp_path / "nope", "synthetic")

    def test_record_rejects_mask_size_mismatch(self):
        with pytest.raises(DatasetError, match="does not match"):
            DatasetRecord(
                name="x",
                image=np.zeros((8, 8, 3), dtype=np.uint8),
                mask=np.zeros((4, 4), dtype=bool),
            )


class TestCheckpoint:
    def params(self):
        return {
            "stage1.conv1.w": Tensor(RNG.normal(size=(4, 3, 3, 3))),
            "stage1.conv1.b": Tensor(RNG.normal(size=4)),
            "stage2.fc.w": Tensor(RNG.normal(size=(10, 2))),
            "scalar": Tensor(np.float64(3.25)),
        }

    def test_bit_exact_roundtrip(self, tmp_path):
        params = self.params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert list(back) == list(params)
        for name in params:
            assert back[name].data.tobytes() == params[name].data.tobytes(), name

    def test_double_roundtrip_identical_bytes(self, tmp_path):
        params = self.params()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(params, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(self.params(), p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(self.params(), p)
        p.write_bytes(p.read_bytes() + b"\x01")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint({}, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)
