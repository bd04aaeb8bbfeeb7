from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossu.errors import (
    InvalidConfigError,
    InvalidGuidanceError,
    InvalidRateError,
    ShapeError,
)
from crossu.model import PRESETS
from crossu.routing import (
    GuidanceSpec,
    auto_guidance,
    make_route_mask,
    route_merge,
    route_split,
    routed_region_bounds,
)


class TestMakeRouteMask:
    def test_rate_zero_keeps_all(self):
        m = make_route_mask(10, 0.0, 0)
        assert len(m.bypassed_indices) == 0
        assert m.kept_indices.tolist() == list(range(10))

    def test_rate_one_bypasses_all(self):
        m = make_route_mask(10, 1.0, 0)
        assert len(m.kept_indices) == 0
        assert m.bypassed_indices.tolist() == list(range(10))

    def test_half_rate_on_256(self):
        m = make_route_mask(256, 0.5, 42)
        assert len(m.bypassed_indices) == 128

    def test_deterministic_and_seed_sensitive(self):
        a = make_route_mask(64, 0.5, 7)
        b = make_route_mask(64, 0.5, 7)
        c = make_route_mask(64, 0.5, 8)
        assert a.kept_indices.tolist() == b.kept_indices.tolist()
        assert a.kept_indices.tolist() != c.kept_indices.tolist()

    def test_rejects_bad_rate(self):
        for rate in (-0.1, 1.5):
            with pytest.raises(InvalidRateError):
                make_route_mask(8, rate, 0)

    @given(
        n=st.integers(0, 200),
        rate=st.floats(0, 1, allow_nan=False),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=100, deadline=None)
    def test_partition_property(self, n, rate, seed):
        m = make_route_mask(n, rate, seed)
        assert len(m.bypassed_indices) == round(rate * n)
        merged = np.concatenate([m.kept_indices, m.bypassed_indices])
        assert sorted(merged.tolist()) == list(range(n))
        assert (np.diff(m.kept_indices) > 0).all()
        assert (np.diff(m.bypassed_indices) > 0).all()


class TestSplitMerge:
    def test_rate_zero_split_is_identity(self):
        x = np.random.default_rng(0).normal(size=(12, 4))
        kept, store = route_split(x, make_route_mask(12, 0.0, 0))
        assert (kept == x).all()
        assert store.shape == (0, 4)

    def test_split_then_merge_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 3))
        for rate in (0.0, 0.25, 0.5, 1.0):
            m = make_route_mask(20, rate, 5)
            kept, store = route_split(x, m)
            assert (route_merge(kept, store, m) == x).all()

    def test_kept_stream_preserves_relative_order(self):
        x = np.arange(10, dtype=np.float64)[:, None]
        m = make_route_mask(10, 0.4, 2)
        kept, store = route_split(x, m)
        assert (np.diff(kept[:, 0]) > 0).all()
        assert (kept[:, 0] == m.kept_indices).all()
        assert (store[:, 0] == m.bypassed_indices).all()

    def test_text_prefix_always_kept(self):
        # stream = 4 text rows then 8 image rows; only image rows routable
        x = np.arange(12, dtype=np.float64)[:, None]
        m = make_route_mask(8, 0.5, 3)
        kept, store = route_split(x, m, image_start=4)
        assert set(x[:4, 0]) <= set(kept[:, 0])
        assert not (store[:, 0] < 4).any()
        assert (route_merge(kept, store, m, image_start=4) == x).all()

    def test_torch_tensors_supported(self):
        x = torch.randn(9, 5)
        m = make_route_mask(9, 0.5, 1)
        kept, store = route_split(x, m)
        assert torch.equal(route_merge(kept, store, m), x)

    def test_merge_rejects_store_length_mismatch(self):
        x = np.zeros((10, 2))
        m = make_route_mask(10, 0.5, 0)
        kept, store = route_split(x, m)
        with pytest.raises(ShapeError):
            route_merge(kept, store[:-1], m)

    def test_split_rejects_span_overflow(self):
        with pytest.raises(ShapeError):
            route_split(np.zeros((5, 2)), make_route_mask(10, 0.5, 0))

    def test_one_region_interleave_oracle(self):
        # region = double the kept rows; merged result must interleave
        # processed and untouched rows exactly by mask membership
        x = np.arange(8, dtype=np.float64)[:, None]
        m = make_route_mask(8, 0.5, 9)
        kept, store = route_split(x, m)
        merged = route_merge(kept * 2, store, m)
        for i in range(8):
            expected = x[i, 0] * 2 if i in set(m.kept_indices) else x[i, 0]
            assert merged[i, 0] == expected

    @given(
        n=st.integers(1, 64),
        rate=st.floats(0, 1),
        seed=st.integers(0, 10_000),
        prefix=st.integers(0, 5),
    )
    @settings(max_examples=80, deadline=None)
    def test_conservation_property(self, n, rate, seed, prefix):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(prefix + n, 2))
        m = make_route_mask(n, rate, seed)
        kept, store = route_split(x, m, image_start=prefix)
        assert kept.shape[0] + store.shape[0] == x.shape[0]
        assert (route_merge(kept, store, m, image_start=prefix) == x).all()


class TestRoutedRegion:
    def test_base_preset_bounds(self):
        assert routed_region_bounds(PRESETS["base"]) == (1, 17)

    def test_whole_stack_when_no_boundary_blocks(self):
        cfg = PRESETS["micro"]
        assert routed_region_bounds(cfg) == (0, cfg.total_blocks)

    def test_empty_region_is_valid(self):
        cfg = SimpleNamespace(
            n_enc=0, n_dec=0, n_depth=1, tread_before=2, tread_after=3
        )
        assert routed_region_bounds(cfg) == (2, 2)

    def test_overflow_rejected(self):
        # total includes the boundary blocks, so overflow needs a malformed
        # config with a negative middle section
        cfg = SimpleNamespace(
            n_enc=-1, n_dec=0, n_depth=1, tread_before=2, tread_after=1
        )
        with pytest.raises(InvalidConfigError):
            routed_region_bounds(cfg)


class TestGuidanceSpec:
    def test_plain_guidance_rates_zero(self):
        spec = GuidanceSpec(scale=3.0)
        assert not spec.routing_active

    def test_valid_differential_rates(self):
        spec = GuidanceSpec(scale=2.0, cond_rate=0.25, uncond_rate=0.5)
        assert spec.routing_active

    def test_rejects_cond_not_below_uncond(self):
        with pytest.raises(InvalidGuidanceError):
            GuidanceSpec(scale=2.0, cond_rate=0.5, uncond_rate=0.5)
        with pytest.raises(InvalidGuidanceError):
            GuidanceSpec(scale=2.0, cond_rate=0.6, uncond_rate=0.4)

    def test_rejects_cond_at_training_rate(self):
        with pytest.raises(InvalidGuidanceError):
            GuidanceSpec(scale=2.0, cond_rate=0.5, uncond_rate=0.9)

    def test_rejects_out_of_range_rates(self):
        with pytest.raises(InvalidRateError):
            GuidanceSpec(scale=1.0, cond_rate=-0.2, uncond_rate=0.5)


class TestAutoGuidance:
    def test_scale_one_returns_cond_exactly(self):
        v_c, v_u = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        assert auto_guidance(v_c, v_u, 1.0) is v_c

    def test_scale_zero_returns_uncond(self):
        v_c, v_u = torch.randn(3, 4), torch.randn(3, 4)
        assert torch.equal(auto_guidance(v_c, v_u, 0.0), v_u)

    def test_extrapolation_formula(self):
        v_c = torch.ones(2, 2)
        v_u = torch.zeros(2, 2)
        assert torch.equal(auto_guidance(v_c, v_u, 2.0), torch.full((2, 2), 2.0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            auto_guidance(torch.zeros(2, 2), torch.zeros(2, 3), 2.0)

    @given(scale=st.floats(-4, 4, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_interpolation_property(self, scale):
        g = torch.Generator().manual_seed(0)
        v_c = torch.randn(5, generator=g, dtype=torch.float64)
        v_u = torch.randn(5, generator=g, dtype=torch.float64)
        out = auto_guidance(v_c, v_u, scale)
        expected = v_u + scale * (v_c - v_u)
        assert torch.allclose(out, expected, atol=1e-12)
