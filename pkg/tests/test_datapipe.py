import itertools
import json

import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from crossu.datapipe import (
    COLORS,
    POSITIONS,
    SHAPES,
    CropSample,
    DatasetSpec,
    corpus_stream,
    export_image,
    inference_position_map,
    load_corpus,
    normalize_image,
    procedural_dataset,
    read_png,
    render_scene,
    resize_min_dim,
    scan_corpus,
    shifted_square_crop,
    write_png,
)
from crossu.errors import CorpusError, InvalidImageError, ShapeError
from crossu.geometry import CameraTransform, compute_ranges, make_position_map


class TestNormalization:
    def test_eight_bit_round_trip_exact(self):
        pixels = np.arange(256, dtype=np.uint8).reshape(8, 32)
        rgb = np.stack([pixels] * 3, axis=-1)
        assert (export_image(normalize_image(rgb)) == rgb).all()

    def test_range(self):
        rgb = np.stack([np.zeros((4, 4), np.uint8), np.full((4, 4), 255, np.uint8),
                        np.full((4, 4), 128, np.uint8)], axis=-1)
        arr = normalize_image(rgb)
        assert arr.min() == -1.0 and arr.max() == 1.0

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
        path = tmp_path / "x.png"
        write_png(path, image)
        again = read_png(path)
        assert (export_image(again) == export_image(image)).all()


class TestResize:
    def test_halves_both_axes(self):
        img = Image.new("RGB", (200, 400))  # PIL size is (W, H)
        out = resize_min_dim(img, 100)
        assert out.size == (100, 200)

    def test_identity_when_min_matches(self):
        img = Image.new("RGB", (100, 100))
        assert resize_min_dim(img, 100) is img
        wide = Image.new("RGB", (7, 3))
        assert resize_min_dim(wide, 3) is wide

    def test_long_side_floors(self):
        # H/W = 333/200; at X=64 the long side is int(333 * 64/200) = 106
        img = Image.new("RGB", (200, 333))
        assert resize_min_dim(img, 64).size == (64, 106)

    def test_degenerate_rejected(self):
        with pytest.raises(InvalidImageError):
            resize_min_dim(Image.new("RGB", (0, 10)), 8)


class TestShiftedCrop:
    def test_square_input_identity(self):
        img = np.random.default_rng(0).normal(size=(3, 16, 16)).astype(np.float32)
        pmap = make_position_map(8, 8)
        cropped, pos, origin = shifted_square_crop(img, pmap, np.random.default_rng(1), 2)
        assert origin == (0, 0)
        assert (cropped == img).all()
        assert (pos.coords == pmap.coords).all()

    def test_tall_crop_matches_seeded_offset(self):
        img = np.random.default_rng(2).normal(size=(3, 32, 16)).astype(np.float32)
        pmap = make_position_map(16, 8)
        rng = np.random.default_rng(7)
        cropped, pos, (y0, x0) = shifted_square_crop(img, pmap, rng, 2)
        expected_tok = np.random.default_rng(7).integers(0, 16 - 8 + 1)
        assert (y0, x0) == (expected_tok * 2, 0)
        assert (cropped == img[:, y0 : y0 + 16, :]).all()
        assert (pos.coords == pmap.coords[y0 // 2 : y0 // 2 + 8, :]).all()

    def test_offsets_patch_aligned_and_cover_range(self):
        img = np.zeros((3, 16, 48), dtype=np.float32)
        pmap = make_position_map(4, 12)
        offsets = set()
        for seed in range(200):
            _, _, (y0, x0) = shifted_square_crop(img, pmap, np.random.default_rng(seed), 4)
            assert y0 == 0 and x0 % 4 == 0
            offsets.add(x0)
        assert offsets == {0, 4, 8, 12, 16, 20, 24, 28, 32}

    def test_map_slice_bitwise(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            ht, wt = int(rng.integers(4, 20)), int(rng.integers(4, 20))
            patch = 2
            img = np.zeros((3, ht * patch, wt * patch), dtype=np.float32)
            pmap = make_position_map(ht, wt)
            _, pos, (y0, x0) = shifted_square_crop(img, pmap, rng, patch)
            s = min(ht, wt)
            ref = make_position_map(ht, wt).coords[
                y0 // patch : y0 // patch + s, x0 // patch : x0 // patch + s
            ]
            assert (pos.coords == ref).all()

    def test_dims_must_agree(self):
        img = np.zeros((3, 16, 16), dtype=np.float32)
        with pytest.raises(ShapeError):
            shifted_square_crop(img, make_position_map(4, 4), np.random.default_rng(0), 2)


class TestInferenceMap:
    def test_identity_square_equals_plain_map(self):
        pmap = inference_position_map(32, 32, 2)
        assert (pmap.coords == make_position_map(16, 16).coords).all()

    def test_two_to_one_ranges(self):
        pmap = inference_position_map(64, 32, 2)
        ranges = compute_ranges(32, 16)
        assert pmap.coords[:, :, 0].max() == pytest.approx(ranges.r_h, abs=1e-12)
        assert pmap.coords[:, :, 1].max() == pytest.approx(ranges.r_w, abs=1e-12)

    def test_zoom_out_widens_span(self):
        base = inference_position_map(32, 32, 2)
        wide = inference_position_map(32, 32, 2, CameraTransform(zoom=0.75))
        assert np.allclose(wide.coords, base.coords / 0.75)

    def test_bad_dims_rejected(self):
        with pytest.raises(ShapeError):
            inference_position_map(33, 32, 2)
        with pytest.raises(ShapeError):
            inference_position_map(0, 32, 2)


class TestProcedural:
    def test_center_red_circle_pixel(self):
        img = render_scene("circle", "red", "center", 32, 32)
        center = img[:, 16, 16]
        assert center[0] > 0.9 and center[1] < -0.9 and center[2] < -0.9

    def test_every_position_paints_inside_canvas(self):
        for shape, position in itertools.product(SHAPES, POSITIONS):
            img = render_scene(shape, "white", position, 24, 36)
            assert (img > 0).any(), (shape, position)

    def test_same_seed_identical_stream(self):
        spec = DatasetSpec(source="procedural:9", train_size=32)
        a = list(itertools.islice(procedural_dataset(spec), 5))
        b = list(itertools.islice(procedural_dataset(spec), 5))
        for (img_a, cap_a), (img_b, cap_b) in zip(a, b):
            assert cap_a == cap_b
            assert (img_a == img_b).all()

    def test_shape_balance(self):
        spec = DatasetSpec(source="procedural:0", train_size=8)
        counts = {s: 0 for s in SHAPES}
        for _, caption in itertools.islice(procedural_dataset(spec), 10_000):
            counts[caption.split()[1]] += 1
        for shape, n in counts.items():
            assert abs(n / 10_000 - 1 / 3) < 0.03, counts

    def test_stream_crops_are_well_formed(self):
        spec = DatasetSpec(source="procedural:3", train_size=32, patch=2)
        for sample in itertools.islice(corpus_stream(spec), 8):
            assert sample.image.shape == (3, 32, 32)
            assert sample.pos.coords.shape == (16, 16, 2)
            assert sample.caption_ids
            assert sample.image.min() >= -1 and sample.image.max() <= 1

    def test_caption_words_tokenize_whole(self):
        from crossu.textcond import ToyTokenizer

        tok = ToyTokenizer()
        spec = DatasetSpec(source="procedural:1", train_size=16)
        for _, caption in itertools.islice(procedural_dataset(spec), 20):
            assert len(tok.encode(caption)) == 3


def _write_corpus(root, n=3, size=(40, 24), corrupt=0):
    rng = np.random.default_rng(0)
    for i in range(n):
        img = rng.uniform(-1, 1, size=(3,) + size).astype(np.float32)
        write_png(root / f"img_{i}.png", img)
        (root / f"img_{i}.txt").write_text(f"blue square center")
    for i in range(corrupt):
        (root / f"bad_{i}.png").write_bytes(b"not a png at all")


class TestCorpus:
    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(CorpusError):
            scan_corpus(DatasetSpec(source=str(tmp_path), train_size=16))

    def test_single_image_many_offsets(self, tmp_path):
        img = np.random.default_rng(1).uniform(-1, 1, (3, 64, 16)).astype(np.float32)
        write_png(tmp_path / "only.png", img)
        (tmp_path / "only.txt").write_text("red triangle top")
        spec = DatasetSpec(source=str(tmp_path), train_size=16, patch=2, seed=4)
        samples = list(itertools.islice(load_corpus(spec), 12))
        assert len({s.crop_origin for s in samples}) > 1
        assert all(s.caption == "red triangle top" for s in samples)

    def test_gradient_image_matches_slicing_oracle(self, tmp_path):
        # 64x128 horizontal gradient: crop pixels must equal a direct slice
        # of the decoded array
        ramp = np.linspace(-1, 1, 128, dtype=np.float32)
        img = np.broadcast_to(ramp, (3, 64, 128)).copy()
        write_png(tmp_path / "ramp.png", img)
        (tmp_path / "ramp.txt").write_text("white square left")
        spec = DatasetSpec(source=str(tmp_path), train_size=64, patch=2, seed=0)
        decoded = read_png(tmp_path / "ramp.png")
        sample = next(load_corpus(spec))
        y0, x0 = sample.crop_origin
        assert (sample.image == decoded[:, y0 : y0 + 64, x0 : x0 + 64]).all()

    def test_corrupt_files_skipped_with_warning(self, tmp_path):
        _write_corpus(tmp_path, n=3, corrupt=1)
        spec = DatasetSpec(source=str(tmp_path), train_size=24)
        with pytest.warns(UserWarning, match="skipped 1"):
            pairs = scan_corpus(spec)
        assert len(pairs) == 3

    def test_mostly_corrupt_corpus_rejected(self, tmp_path):
        _write_corpus(tmp_path, n=1, corrupt=4)
        spec = DatasetSpec(source=str(tmp_path), train_size=24)
        with pytest.warns(UserWarning):
            with pytest.raises(CorpusError):
                scan_corpus(spec)

    def test_manifest_source(self, tmp_path):
        _write_corpus(tmp_path, n=2)
        manifest = [
            {"image": "img_0.png", "caption": "green circle top"},
            {"image": "img_1.png"},
        ]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        spec = DatasetSpec(source=str(tmp_path / "manifest.json"), train_size=24)
        pairs = scan_corpus(spec)
        assert [c for _, c in pairs] == ["green circle top", "blue square center"]
        sample = next(load_corpus(spec))
        assert sample.image.shape == (3, 24, 24)

    def test_train_size_patch_divisibility(self):
        with pytest.raises(ShapeError):
            DatasetSpec(source="procedural:0", train_size=30, patch=4)


class TestCropConsistencyProperty:
    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_pipeline_slice_equals_fresh_map_slice(self, seed):
        rng = np.random.default_rng(seed)
        patch = int(rng.choice([1, 2, 4]))
        s_tok = int(rng.integers(2, 10))
        long_tok = s_tok + int(rng.integers(0, 10))
        if rng.integers(2):
            ht, wt = long_tok, s_tok
        else:
            ht, wt = s_tok, long_tok
        img = rng.normal(size=(3, ht * patch, wt * patch)).astype(np.float32)
        pmap = make_position_map(ht, wt)
        _, pos, (y0, x0) = shifted_square_crop(img, pmap, rng, patch)
        fresh = make_position_map(ht, wt).coords[
            y0 // patch : y0 // patch + s_tok, x0 // patch : x0 // patch + s_tok
        ]
        assert pos.coords.tobytes() == fresh.tobytes()
