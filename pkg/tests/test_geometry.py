import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossu.errors import InvalidDimensionError, InvalidTransformError, ShapeError
from crossu.geometry import (
    AspectRanges,
    CameraTransform,
    RopeFrequencies,
    apply_camera,
    compute_ranges,
    make_position_map,
    rope_angles,
    rope_rotate,
    transform_position_map,
)


class TestComputeRanges:
    def test_square_is_unit(self):
        assert compute_ranges(256, 256) == AspectRanges(1.0, 1.0)

    def test_tall_4_to_1(self):
        # direct substitution: sqrt(1024/256) = 2, sqrt(256/1024) = 0.5
        assert compute_ranges(1024, 256) == AspectRanges(2.0, 0.5)

    def test_wide_1_to_2(self):
        # closed form in double precision; product must be 1
        r = compute_ranges(512, 1024)
        assert r.r_h == pytest.approx(0.7071067811865476, abs=1e-15)
        assert r.r_w == pytest.approx(1.4142135623730951, abs=1e-15)
        assert r.r_h * r.r_w == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("h,w", [(0, 4), (4, 0), (-1, 2)])
    def test_invalid_dims(self, h, w):
        with pytest.raises(InvalidDimensionError):
            compute_ranges(h, w)

    @given(
        st.integers(min_value=1, max_value=4096),
        st.integers(min_value=1, max_value=4096),
    )
    @settings(max_examples=300)
    def test_constraints_hold(self, h, w):
        r = compute_ranges(h, w)
        assert abs(r.r_h * r.r_w - 1.0) <= 1e-12
        ratio = h / w
        # relative tolerance: extreme ratios (up to 4096) carry a few ulp of
        # rounding that exceeds 1e-12 in absolute terms
        assert abs(r.r_h / r.r_w - ratio) <= 1e-12 * max(1.0, ratio)


class TestMakePositionMap:
    def test_2x2_corners(self):
        m = make_position_map(2, 2)
        corners = {tuple(m.coords[i, j]) for i in range(2) for j in range(2)}
        assert corners == {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}

    def test_3x3_center_is_origin(self):
        m = make_position_map(3, 3)
        assert m.coords[1, 1, 0] == 0.0
        assert m.coords[1, 1, 1] == 0.0

    def test_4x2_coords(self):
        # r_h = sqrt(2), r_w = 1/sqrt(2); linspace endpoints and spacing
        m = make_position_map(4, 2)
        rt2 = math.sqrt(2.0)
        np.testing.assert_allclose(
            m.coords[:, 0, 0], [-rt2, -rt2 / 3, rt2 / 3, rt2], atol=1e-15
        )
        np.testing.assert_allclose(
            m.coords[0, :, 1], [-1 / rt2, 1 / rt2], atol=1e-15
        )

    def test_single_cell_axis_sits_at_midpoint(self):
        m = make_position_map(1, 4)
        assert (m.coords[0, :, 0] == 0.0).all()

    def test_invalid_dims(self):
        with pytest.raises(InvalidDimensionError):
            make_position_map(0, 4)

    @given(
        st.integers(min_value=2, max_value=48),
        st.integers(min_value=2, max_value=48),
        st.randoms(use_true_random=False),
    )
    @settings(max_examples=100)
    def test_slicing_commutes_with_construction(self, h, w, rnd):
        m = make_position_map(h, w)
        s = rnd.randint(1, min(h, w))
        y0 = rnd.randint(0, h - s)
        x0 = rnd.randint(0, w - s)
        window = m.slice_window(y0, x0, s, s)
        expected = make_position_map(h, w).coords[y0 : y0 + s, x0 : x0 + s]
        assert (window.coords == expected).all()

    def test_slice_out_of_bounds(self):
        with pytest.raises(ShapeError):
            make_position_map(4, 4).slice_window(2, 2, 4, 4)


class TestCameraTransform:
    def test_identity_is_bitwise_equal(self):
        base = make_position_map(7, 5)
        out = apply_camera((7, 5), CameraTransform())
        assert (out.coords == base.coords).all()

    def test_x_shift(self):
        out = apply_camera((2, 2), CameraTransform(shift_x=0.25))
        np.testing.assert_allclose(out.coords[0, :, 1], [-0.75, 1.25], atol=1e-15)
        # h coordinates untouched
        np.testing.assert_allclose(out.coords[:, 0, 0], [-1.0, 1.0], atol=0)

    def test_zoom_in_halves_span(self):
        out = apply_camera((2, 2), CameraTransform(zoom=2.0))
        corners = {tuple(out.coords[i, j]) for i in range(2) for j in range(2)}
        assert corners == {(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)}

    def test_zoom_out_widens_span(self):
        out = apply_camera((2, 2), CameraTransform(zoom=0.75))
        assert out.coords[1, 1, 0] == pytest.approx(1 / 0.75)

    def test_shift_applied_after_zoom(self):
        out = apply_camera((2, 2), CameraTransform(shift_x=0.25, zoom=2.0))
        np.testing.assert_allclose(out.coords[0, :, 1], [-0.25, 0.75], atol=1e-15)

    def test_invalid_zoom(self):
        with pytest.raises(InvalidTransformError):
            CameraTransform(zoom=0.0)
        with pytest.raises(InvalidTransformError):
            CameraTransform(zoom=-1.0)

    def test_transform_existing_map(self):
        m = make_position_map(3, 3)
        out = transform_position_map(m, CameraTransform(shift_y=-0.5))
        np.testing.assert_allclose(out.coords[..., 0], m.coords[..., 0] - 0.5)


class TestRopeFrequencies:
    def test_rejects_odd_head_dim(self):
        with pytest.raises(InvalidDimensionError):
            RopeFrequencies(head_dim=30, rotated_fraction=0.5)  # 15 rotated

    def test_rejects_non_multiple_of_four(self):
        with pytest.raises(InvalidDimensionError):
            RopeFrequencies(head_dim=12, rotated_fraction=0.5)  # 6 rotated

    def test_layout_counts(self):
        f = RopeFrequencies(head_dim=64)
        assert f.rotated_dims == 32
        assert f.dims_per_axis == 16
        assert f.pairs_per_axis == 8
        assert f.axis_freqs().shape == (8,)
        assert f.axis_freqs()[0] == 1.0


class TestRopeRotate:
    def test_zero_position_is_identity(self):
        rng = np.random.default_rng(0)
        f = RopeFrequencies(head_dim=32)
        x = rng.standard_normal(32)
        np.testing.assert_array_equal(rope_rotate(x, (0.0, 0.0), f), x)

    def test_unrotated_half_untouched(self):
        rng = np.random.default_rng(1)
        f = RopeFrequencies(head_dim=32)
        x = rng.standard_normal(32)
        out = rope_rotate(x, (0.7, -1.3), f)
        assert (out[16:] == x[16:]).all()

    def test_per_pair_norms_preserved(self):
        rng = np.random.default_rng(2)
        f = RopeFrequencies(head_dim=64)
        for _ in range(20):
            x = rng.standard_normal(64)
            pos = rng.uniform(-2, 2, size=2)
            out = rope_rotate(x, pos, f)
            a = x[:32].reshape(16, 2)
            b = out[:32].reshape(16, 2)
            np.testing.assert_allclose(
                np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1), atol=1e-6
            )

    def test_head_dim_mismatch(self):
        f = RopeFrequencies(head_dim=32)
        with pytest.raises(ShapeError):
            rope_rotate(np.zeros(16), (0.0, 0.0), f)

    def test_shift_equivariance_of_logits(self):
        # inner products of rotated q, k depend only on relative position:
        # >= 100 random draws, double precision, tolerance 1e-5
        rng = np.random.default_rng(3)
        f = RopeFrequencies(head_dim=32)
        for _ in range(120):
            q = rng.standard_normal(32)
            k = rng.standard_normal(32)
            p1 = rng.uniform(-1.5, 1.5, size=2)
            p2 = rng.uniform(-1.5, 1.5, size=2)
            delta = rng.uniform(-1.0, 1.0, size=2)
            base = rope_rotate(q, p1, f) @ rope_rotate(k, p2, f)
            shifted = rope_rotate(q, p1 + delta, f) @ rope_rotate(k, p2 + delta, f)
            assert abs(base - shifted) <= 1e-5

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        f = RopeFrequencies(head_dim=16)
        xs = rng.standard_normal((5, 16))
        ps = rng.uniform(-1, 1, size=(5, 2))
        batched = rope_rotate(xs, ps, f)
        for i in range(5):
            np.testing.assert_array_equal(batched[i], rope_rotate(xs[i], ps[i], f))

    def test_angle_layout_axial_split(self):
        f = RopeFrequencies(head_dim=16)  # 8 rotated, 2 pairs/axis
        ang = rope_angles(np.array([2.0, 3.0]), f)
        w = f.axis_freqs()
        np.testing.assert_allclose(ang[:2], 2.0 * w)
        np.testing.assert_allclose(ang[2:], 3.0 * w)
