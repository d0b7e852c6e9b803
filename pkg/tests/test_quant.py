import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bisup.errors import ConfigError, NumericError, ShapeError
from bisup.quant import (
    DEFAULT_CLIP_GRID,
    QuantConfig,
    QuantSpec,
    QuantTape,
    compute_scale_symmetric,
    dequantize,
    fake_quant_asym,
    fake_quant_asym_backward,
    fake_quant_sym,
    fake_quant_sym_backward,
    grid_search_clip,
    quant_error,
    quantize,
    quantize_rtn_asymmetric,
    quantize_rtn_symmetric,
    round_half_away,
)

vals = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
bits = st.integers(2, 8)


def sym(n, gran="per_token", g=None, clip=None):
    return QuantSpec(n, True, gran, g, clip)


def asym(n, gran="per_token", g=None, clip=None):
    return QuantSpec(n, False, gran, g, clip)


def fixed_scale_codes(x, delta, n):
    # codes for a known step, written straight from the rounding rule
    q = np.sign(x) * np.floor(np.abs(x) / delta + 0.5)
    return np.clip(q, -(2 ** (n - 1)), 2 ** (n - 1) - 1)


class TestScale:
    def test_unit_step(self):
        assert compute_scale_symmetric(np.array([7.0, -2.0]), 4, 1.0) == 1.0

    def test_clip_scales_step(self):
        assert abs(compute_scale_symmetric(np.array([7.0]), 4, 0.9) - 0.9) < 1e-15

    def test_three_bits(self):
        assert abs(compute_scale_symmetric(np.array([-1.0, 0.5]), 3, 1.0) - 1 / 3) < 1e-15

    def test_zero_group(self):
        assert compute_scale_symmetric(np.zeros(4), 4) == 1.0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            compute_scale_symmetric(np.array([np.inf]), 4)


class TestSymmetric:
    def test_direct_rounding(self):
        q = quantize_rtn_symmetric(np.array([0.4, -3.2, 7.0]), sym(4))
        assert q.codes.tolist() == [0, -3, 7] and q.scales.tolist() == [1.0]

    def test_upper_clamp(self):
        x = np.array([10.0, 7.0])
        q = quantize_rtn_symmetric(x, sym(4, clip=0.7))  # step 10*0.7/7 = 1
        assert q.codes.tolist() == [7, 7]
        assert fixed_scale_codes(np.array([10.0]), 1.0, 4).tolist() == [7]

    def test_dequantize_composition(self):
        q = quantize_rtn_symmetric(np.array([0.4, -3.2, 7.0]), sym(4))
        assert dequantize(q).tolist() == [0.0, -3.0, 7.0]

    def test_half_away_from_zero(self):
        assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]

    def test_clipping_spends_range_on_bulk(self):
        x = np.random.default_rng(0).normal(size=512)
        full = quantize_rtn_symmetric(x, sym(4))
        half = quantize_rtn_symmetric(x, sym(4, clip=0.5))
        qmax = 7
        assert np.max(half.codes) == qmax or np.min(half.codes) == -qmax - 1
        assert np.argmax(np.abs(x)) in np.flatnonzero(np.abs(half.codes) >= qmax)
        assert len(np.unique(half.codes)) > len(np.unique(full.codes))

    @pytest.mark.parametrize("n", [2, 3, 4, 8])
    def test_zero_tensor(self, n):
        for spec in (sym(n), asym(n), sym(n, "group", 2)):
            assert np.array_equal(dequantize(quantize(np.zeros((2, 4)), spec)), np.zeros((2, 4)))

    @given(arrays(np.float64, (3, 8), elements=vals), bits)
    def test_most_negative_code_unused(self, x, n):
        q = quantize_rtn_symmetric(x, sym(n, "group", 4))
        assert q.codes.min() >= -(2 ** (n - 1) - 1)
        assert q.codes.max() <= 2 ** (n - 1) - 1

    @given(arrays(np.float64, (4, 8), elements=vals), bits)
    def test_half_step_bound(self, x, n):
        q = quantize_rtn_symmetric(x, sym(n, "group", 4))
        err = np.abs(x - dequantize(q)).reshape(4, 2, 4)
        assert np.all(err <= q.scales[..., None] / 2 * (1 + 1e-12))

    @given(arrays(np.float64, (3, 8), elements=vals), st.integers(0, 1), bits)
    def test_group_of_full_length_is_per_channel(self, x, axis, n):
        length = x.shape[axis]
        a = quantize_rtn_symmetric(x, sym(n, "group", length), axis)
        b = quantize_rtn_symmetric(x, sym(n, "per_channel"), axis)
        assert a.to_bytes() == b.to_bytes()

    @given(arrays(np.float64, (1, 8), elements=vals), bits)
    def test_tensor_equals_channel_on_one_row(self, x, n):
        a = quantize_rtn_symmetric(x, sym(n, "tensor"))
        b = quantize_rtn_symmetric(x, sym(n, "per_token"))
        assert np.array_equal(a.codes, b.codes) and np.array_equal(dequantize(a), dequantize(b))

    def test_per_group_clip_array(self):
        x = np.array([[4.0, 1.0, 8.0, 2.0]])
        q = quantize_rtn_symmetric(x, sym(3, "group", 2, clip=np.array([[1.0, 0.5]])))
        assert np.allclose(q.scales, [[4 / 3, 8 / 3 * 0.5]])

    def test_group_must_divide(self):
        with pytest.raises(ShapeError):
            quantize(np.ones((2, 6)), sym(4, "group", 4))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            QuantSpec(9)
        with pytest.raises(ConfigError):
            QuantSpec(4, clip=1.5)
        with pytest.raises(ConfigError):
            QuantSpec(4, granularity="group")

    def test_deterministic_bytes(self):
        x = np.random.default_rng(1).normal(size=(4, 16))
        assert quantize(x, sym(3, "group", 4)).to_bytes() == quantize(x.copy(), sym(3, "group", 4)).to_bytes()

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            quantize(np.array([1.0, np.nan]), sym(4))


class TestAsymmetric:
    def test_formula(self):
        q = quantize_rtn_asymmetric(np.array([-1.0, 0.0, 3.0]), asym(4))
        assert abs(q.scales[0] - 4 / 15) < 1e-15
        assert q.zero_points.tolist() == [4]

    def test_constant_group_exact(self):
        for v in (5.0, -2.5, 0.0, 0.3):
            x = np.full(3, v)
            q = quantize_rtn_asymmetric(x, asym(4))
            assert len(set(q.codes.tolist())) == 1
            assert np.array_equal(dequantize(q), x)

    def test_integer_aligned(self):
        q = quantize_rtn_asymmetric(np.array([0.0, 15.0]), asym(4))
        assert q.scales.tolist() == [1.0] and q.zero_points.tolist() == [0]
        assert q.codes.tolist() == [0, 15]

    @given(arrays(np.float64, (3, 6), elements=vals), bits)
    def test_codes_in_range(self, x, n):
        q = quantize_rtn_asymmetric(x, asym(n))
        assert np.all((q.codes >= 0) & (q.codes <= 2**n - 1))
        assert np.all((q.zero_points >= 0) & (q.zero_points <= 2**n - 1))

    @given(arrays(np.float64, (3, 6), elements=vals), bits)
    def test_extremes_near_range_ends(self, x, n):
        # rows straddling zero, the case where the clamped zero point is exact
        x = x.copy()
        x[:, 0] = -np.abs(x[:, 0]) - 1.0
        x[:, 1] = np.abs(x[:, 1]) + 1.0
        q = quantize_rtn_asymmetric(x, asym(n))
        top = 2**n - 1
        for row, c in zip(x, q.codes):
            assert c[np.argmin(row)] <= 1 and c[np.argmax(row)] >= top - 1

    @given(arrays(np.float64, (3, 6), elements=vals), bits)
    def test_one_step_bound_when_straddling_zero(self, x, n):
        x = x.copy()
        x[:, 0] = -np.abs(x[:, 0]) - 1.0
        x[:, 1] = np.abs(x[:, 1]) + 1.0
        q = quantize_rtn_asymmetric(x, asym(n))
        err = np.abs(x - dequantize(q))
        assert np.all(err <= q.scales * (1 + 1e-9))

    def test_one_signed_group_saturates(self):
        # the zero point is clamped into the code range, so a group far from
        # zero cannot be shifted down to code 0
        q = quantize_rtn_asymmetric(np.array([1.0, 2.0]), asym(2))
        assert q.zero_points.tolist() == [0] and q.codes.tolist() == [3, 3]

    def test_needs_asymmetric_spec(self):
        with pytest.raises(ConfigError):
            quantize_rtn_asymmetric(np.ones(3), sym(4))


class TestGridSearch:
    def test_representable_prefers_one(self):
        assert grid_search_clip(np.array([[-3.0, 0.0, 1.0, 3.0]]), sym(3)) == 1.0

    def test_singleton(self):
        w = np.random.default_rng(0).normal(size=(4, 8))
        assert grid_search_clip(w, sym(3), grid=[0.9]) == 0.9

    def test_matches_exhaustive(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            w = rng.normal(size=(16, 32))
            spec = sym(3, "group", 16)
            errs = []
            for c in DEFAULT_CLIP_GRID:
                d = w - dequantize(quantize(w, spec.with_clip(c), 0))
                errs.append(float(np.sum(d * d)))
            best = min(errs)
            want = max(c for c, e in zip(DEFAULT_CLIP_GRID, errs) if e == best)
            assert grid_search_clip(w, spec, axis=0) == want

    def test_grid_default(self):
        assert DEFAULT_CLIP_GRID == (0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0)

    def test_quant_error_is_squared_sum(self):
        x = np.array([0.4, -3.2, 7.0])
        assert abs(quant_error(x, sym(4)) - (0.16 + 0.04)) < 1e-12


class TestConfig:
    def test_parse(self):
        c = QuantConfig.parse("W3A3-g16")
        assert (c.weight_bits, c.act_bits, c.group_size, c.kv_bits) == (3, 3, 16, 3)
        assert c.act_clip == 0.9
        assert QuantConfig.parse("W4A4").group_size is None
        assert c.name == "W3A3-g16"

    @pytest.mark.parametrize("bad", ["W3", "A3W3", "W9A3", "W4A4-g0", "w4a4"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            QuantConfig.parse(bad)

    def test_kv_follows_activations(self):
        kv = QuantConfig.parse("W4A8-g16").kv_spec()
        assert kv.bits == 8 and not kv.symmetric and kv.granularity == "per_token"


class TestFakeQuant:
    """The differentiable route must agree with the integer route bit for bit."""

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 8), elements=vals), bits,
           st.floats(0.3, 1.0), st.sampled_from([None, 2, 4, 8]))
    def test_sym_matches_integer_path(self, x, n, c, g):
        spec = sym(n, "group", g, clip=c) if g else sym(n, clip=c)
        y, _ = fake_quant_sym(x, n, g, c)
        assert np.array_equal(y, dequantize(quantize(x, spec)))

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 8), elements=vals), bits)
    def test_asym_matches_integer_path(self, x, n):
        y, _ = fake_quant_asym(x, n)
        assert np.array_equal(y, dequantize(quantize(x, asym(n))))

    def test_asym_clip_matches_integer_path(self):
        x = np.random.default_rng(0).normal(size=(5, 8))
        y, _ = fake_quant_asym(x, 3, 0.8)
        assert np.array_equal(y, dequantize(quantize(x, asym(3, clip=0.8))))

    def test_ste_zero_outside_range(self):
        x = np.array([[0.1, 0.2, 10.0]])
        y, ctx = fake_quant_sym(x, 3, None, 0.5)
        dx, _ = fake_quant_sym_backward(np.ones_like(x), ctx)
        assert dx[0, 2] == 0.0 and dx[0, 0] == 1.0

    def test_zero_group_clip_grad_is_zero(self):
        x = np.array([[0.0, 0.0, 1.0, -2.0]])
        _, ctx = fake_quant_sym(x, 3, 2, np.array([0.8, 0.9]))
        _, dclip = fake_quant_sym_backward(np.ones_like(x), ctx)
        assert dclip[0] == 0.0

    def test_flat_group_clip_grad_is_zero(self):
        x = np.array([[2.0, 2.0, 2.0]])
        _, ctx = fake_quant_asym(x, 3, np.array([0.7]))
        _, dclip = fake_quant_asym_backward(np.ones_like(x), ctx)
        assert np.all(dclip == 0.0)

    def test_clip_grad_by_difference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 8))
        dy = rng.normal(size=x.shape)
        c = np.array([0.83, 0.91])
        tape = QuantTape()
        _, ctx = fake_quant_sym(x, 3, 4, c, tape)
        _, dclip = fake_quant_sym_backward(dy, ctx)
        h = 1e-6
        for j in range(2):
            cp, cm = c.copy(), c.copy()
            cp[j] += h
            cm[j] -= h
            tape.start_replay()
            fp = np.sum(dy * fake_quant_sym(x, 3, 4, cp, tape)[0])
            tape.start_replay()
            fm = np.sum(dy * fake_quant_sym(x, 3, 4, cm, tape)[0])
            assert not tape.flipped
            assert abs((fp - fm) / (2 * h) - dclip[j]) < 1e-6 * max(1, abs(dclip[j]))
