"""Integer kernels: fixed-point multipliers, isqrt, requantization, moments."""

import math

import numpy as np
import pytest

from quantlab.intkernel import (
    FixedPointMultiplier,
    IntMomentEstimate,
    conv2d_s8,
    div_round_half_even,
    estimate_moments_int,
    int_interval_params,
    isqrt,
    linear_s8,
    requantize,
    rounding_rshift,
    widen_bias,
)
from quantlab.moments import IntervalParams, estimate_linear, fit_weight_stats
from quantlab.nn import im2col
from quantlab.quant import qparams_zero_anchored, quantize_tensor
from quantlab.tensor import Tensor


def _t(a):
    return Tensor.from_array(np.asarray(a, dtype=np.float64))


def _stats(mean, var):
    base = fit_weight_stats(_t([[0.0]]), "tensor")
    return type(base)(mode="tensor", mean=np.array([mean]), var=np.array([var]))


# ------------------------------------------------------------ arithmetic


def test_rounding_rshift_half_even():
    assert rounding_rshift(5, 1) == 2   # 2.5 -> 2
    assert rounding_rshift(7, 1) == 4   # 3.5 -> 4
    assert rounding_rshift(6, 2) == 2   # 1.5 -> 2
    assert rounding_rshift(-5, 1) == -2
    assert rounding_rshift(-7, 1) == -4


def test_div_round_half_even():
    assert div_round_half_even(5, 2) == 2
    assert div_round_half_even(7, 2) == 4
    assert div_round_half_even(-5, 2) == -2
    assert div_round_half_even(10, 4) == 2  # 2.5 -> 2
    with pytest.raises(ValueError):
        div_round_half_even(1, 0)


def test_fpm_encoding_bounds_and_error(rng):
    for _ in range(2000):
        r = float(np.exp(rng.uniform(-20, 6)))
        fpm = FixedPointMultiplier.encode(r)
        assert (1 << 30) <= fpm.multiplier < (1 << 31)
        assert abs(fpm.value() - r) / r <= 2.0**-30


def test_fpm_apply_matches_float_reference(rng):
    for _ in range(2000):
        r = float(np.exp(rng.uniform(-12, 0)))
        fpm = FixedPointMultiplier.encode(r)
        x = int(rng.integers(-(1 << 31), 1 << 31))
        got = fpm.apply(x)
        want = round(x * fpm.value())  # binary64 half-even reference
        assert abs(got - want) <= 1


def test_fpm_apply_array_matches_scalar(rng):
    fpm = FixedPointMultiplier.encode(0.0123)
    xs = rng.integers(-(1 << 30), 1 << 30, size=500)
    np.testing.assert_array_equal(
        fpm.apply_array(xs), [fpm.apply(int(x)) for x in xs]
    )


def test_fpm_rejects_bad_inputs():
    with pytest.raises(ValueError):
        FixedPointMultiplier.encode(0.0)
    with pytest.raises(ValueError):
        FixedPointMultiplier.encode(-1.0)
    with pytest.raises(ValueError):
        FixedPointMultiplier(1, 0)


def test_isqrt_hand_value():
    assert isqrt(10**6 + 1) == 1000


def test_isqrt_exhaustive_small():
    for n in range(1 << 20):
        assert isqrt(n) == math.isqrt(n)


def test_isqrt_random_64bit(rng):
    assert isqrt(0) == 0
    for _ in range(5000):
        n = int(rng.integers(0, 1 << 63))
        assert isqrt(n) == math.isqrt(n)
    with pytest.raises(ValueError):
        isqrt(-1)


def test_requantize_monotone(rng):
    fpm = FixedPointMultiplier.encode(0.017)
    accs = sorted(int(rng.integers(-(1 << 20), 1 << 20)) for _ in range(200))
    qs = [requantize(a, fpm, 3, 8) for a in accs]
    assert all(a <= b for a, b in zip(qs, qs[1:]))
    assert all(-128 <= q <= 127 for q in qs)


# ------------------------------------------------------- integer kernels


def test_linear_s8_matches_float_within_one_step(rng):
    for _ in range(60):
        d, h = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        x = rng.uniform(-1, 1, size=d)
        w = rng.normal(size=(h, d))
        x_q = quantize_tensor(_t(x), "tensor", 8)
        w_q = quantize_tensor(_t(w), "tensor", 8)
        x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
        w_hat = (w_q.array() - w_q.params.zero_point) * w_q.params.scale
        y = w_hat @ x_hat
        out_p = qparams_zero_anchored(float(y.min()), float(y.max()), 8)
        got = linear_s8(x_q, w_q, None, out_p)
        ref = np.clip(
            np.rint(y / out_p.scale) + out_p.zero_point, -128, 127
        )
        assert np.max(np.abs(got.array() - ref)) <= 1


def test_conv2d_s8_matches_float_within_one_step(rng):
    for _ in range(40):
        c = int(rng.integers(1, 3))
        hw = int(rng.integers(3, 7))
        k = int(rng.integers(1, 4))
        l = int(rng.integers(1, 4))
        x = rng.uniform(-1, 1, size=(c, hw, hw))
        w = rng.normal(size=(l, c, k, k))
        b = rng.uniform(-0.5, 0.5, size=l)
        x_q = quantize_tensor(_t(x), "tensor", 8)
        w_q = quantize_tensor(_t(w), "channel", 8)
        x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
        sc = w_q.params.scales()[:, None, None, None]
        zp = w_q.params.zero_points()[:, None, None, None]
        w_hat = (w_q.array() - zp) * sc
        patches, oh, ow = im2col(x_hat, (k, k), (1, 1), (0, 0))
        y = (patches @ w_hat.reshape(l, -1).T).T.reshape(l, oh, ow)
        y = y + b[:, None, None]
        out_p = qparams_zero_anchored(float(y.min()), float(y.max()), 8)
        b_int = widen_bias(_t(b), x_q.params.scale, w_q.params, l)
        got = conv2d_s8(x_q, w_q, b_int, out_p, stride=(1, 1), padding=(0, 0))
        ref = np.clip(np.rint(y / out_p.scale) + out_p.zero_point, -128, 127)
        assert np.max(np.abs(got.array() - ref)) <= 1


def test_conv2d_s8_padding_uses_zero_point(rng):
    """Padded taps must contribute exact zeros after dequantization."""
    x = rng.uniform(0.2, 1.0, size=(1, 3, 3))  # strictly positive range
    x_q = quantize_tensor(_t(x), "tensor", 8)
    w_q = quantize_tensor(_t(np.ones((1, 1, 3, 3))), "tensor", 8)
    x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
    w_hat = (w_q.array() - w_q.params.zero_point) * w_q.params.scale
    pad = np.pad(x_hat[0], 2)
    y = np.zeros((1, 5, 5))
    for i in range(5):
        for j in range(5):
            y[0, i, j] = (pad[i : i + 3, j : j + 3] * w_hat[0, 0]).sum()
    out_p = qparams_zero_anchored(float(y.min()), float(y.max()), 8)
    got = conv2d_s8(x_q, w_q, None, out_p, stride=(1, 1), padding=(2, 2))
    ref = np.clip(np.rint(y / out_p.scale) + out_p.zero_point, -128, 127)
    assert np.max(np.abs(got.array() - ref)) <= 1


def test_widen_bias_overflow_guard():
    p = qparams_zero_anchored(-1.0, 1.0, 8)
    with pytest.raises(OverflowError):
        widen_bias(_t([1e9]), p.scale, p, 1)


# ------------------------------------------------- integer moment estimator


def test_int_linear_estimate_tracks_real(rng):
    for _ in range(200):
        d = int(rng.integers(2, 32))
        x = rng.uniform(-1, 1, size=d)
        ws = _stats(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.001, 0.3)))
        x_q = quantize_tensor(_t(x), "tensor", 8)
        est_i = estimate_moments_int(x_q, ws)[0].to_moments()
        x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
        est_r = estimate_linear(_t(x_hat), ws)
        sd_r = math.sqrt(est_r.var)
        if sd_r > 1e-6:
            assert math.sqrt(max(est_i.var, 0.0)) == pytest.approx(sd_r, rel=0.02)
        assert est_i.mean == pytest.approx(est_r.mean, abs=1e-4 * d + 1e-9)


def test_int_conv_estimate_tracks_real(rng):
    from quantlab.moments import aggregate, estimate_conv

    for _ in range(40):
        hw = int(rng.integers(5, 10))
        x = rng.uniform(-1, 1, size=(1, hw, hw))
        ws = _stats(float(rng.uniform(-0.4, 0.4)), float(rng.uniform(0.01, 0.2)))
        x_q = quantize_tensor(_t(x), "tensor", 8)
        est_i = estimate_moments_int(x_q, ws, kernel=(3, 3))[0].to_moments()
        x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
        est_r = aggregate(estimate_conv(_t(x_hat), ws, (3, 3)))
        assert est_i.mean == pytest.approx(est_r.mean, abs=1e-3)
        if est_r.var > 1e-8:
            assert est_i.var == pytest.approx(est_r.var, rel=0.02, abs=1e-6)


def test_int_interval_params_quarter_grid():
    # mean 0, sigma exactly 1.0 on the fixed point, alpha/beta on quarter steps
    est = IntMomentEstimate(0, 1 << 32)
    p = int_interval_params(est, IntervalParams(2.25, 3.5), 8)
    assert p.scale == pytest.approx(5.75 / 255, rel=1e-12)


def test_int_interval_params_zero_anchor():
    # range [9, 11] must widen down to zero like every other range
    est = IntMomentEstimate(10 << 16, 1 << 32)
    p = int_interval_params(est, IntervalParams(1.0, 1.0), 8)
    assert p.scale == pytest.approx(11.0 / 255, rel=1e-12)
    assert p.zero_point == -128


def test_isqrt_feeds_interval_widths():
    # var 4.0 in 2^-32 units -> sigma 2.0; [-2, 2] across the signed grid
    est = IntMomentEstimate(0, 4 << 32)
    p = int_interval_params(est, IntervalParams(1.0, 1.0), 8)
    assert p.scale == pytest.approx(4.0 / 255, rel=1e-12)
    assert p.zero_point == 0
