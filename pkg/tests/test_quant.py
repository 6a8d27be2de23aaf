"""Affine quantization: hand oracles plus seeded property sweeps."""

import math

import numpy as np
import pytest

from quantlab.quant import (
    ChannelQuantParams,
    QuantParams,
    dequantize,
    dequantize_array,
    dequantize_tensor,
    qparams_from_range,
    qparams_zero_anchored,
    quantize,
    quantize_array,
    quantize_tensor,
    quantize_with,
)
from quantlab.tensor import Tensor


def ulp(x: float) -> float:
    return math.ulp(abs(x)) if x else math.ulp(1.0)


# ---------------------------------------------------------------- oracles


def test_quantize_hand_value():
    # round(0.3 / 0.1) - 5 = round(3) - 5
    assert quantize(0.3, QuantParams(0.1, -5, 8)) == -2


def test_dequantize_inverse_of_hand_value():
    assert dequantize(-2, QuantParams(0.1, -5, 8)) == pytest.approx(0.3)


def test_qparams_symmetric_unit_range():
    p = qparams_from_range(-1.0, 1.0, 8)
    assert p.scale == pytest.approx(2.0 / 255.0)
    assert p.zero_point == 0  # -round(-127.5) - 128, half-even


def test_qparams_unit_interval():
    p = qparams_from_range(0.0, 1.0, 8)
    assert p.scale == pytest.approx(1.0 / 255.0)
    assert p.zero_point == -128


def test_qparams_degenerate_zero_range():
    p = qparams_from_range(0.0, 0.0, 8)
    assert p.scale == 2.0**-20
    assert p.zero_point == -128


def test_degenerate_scale_tracks_magnitude():
    p = qparams_from_range(3.0, 3.0, 8)
    assert p.scale == 3.0 * 2.0**-20


def test_tensor_round_trip_symmetric():
    qt = quantize_tensor(Tensor.from_array(np.array([[-1.0, 0.0, 1.0]])), "tensor", 8)
    assert qt.params.scale == pytest.approx(2.0 / 255.0)
    assert qt.params.zero_point == 0
    np.testing.assert_array_equal(qt.data, [-128, 0, 127])


def test_per_channel_scales():
    a = np.stack([np.array([-1.0, 1.0]), np.array([0.0, 4.0])])
    qt = quantize_tensor(Tensor.from_array(a), "channel", 8)
    np.testing.assert_allclose(qt.params.scales(), [2.0 / 255.0, 4.0 / 255.0])


# ------------------------------------------------------------- properties


def test_round_trip_bound_random_ranges(rng):
    for _ in range(2000):
        b = int(rng.integers(2, 17))
        m = float(rng.uniform(-40, 40))
        M = m + float(rng.uniform(0, 80))
        p = qparams_zero_anchored(m, M, b)
        x = float(rng.uniform(m, M))
        err = abs(dequantize(quantize(x, p), p) - x)
        assert err <= p.scale / 2 + 4 * ulp(max(abs(m), abs(M)))


def test_monotonicity(rng):
    p = qparams_zero_anchored(-3.0, 5.0, 8)
    xs = np.sort(rng.uniform(-4, 6, 500))
    qs = [quantize(float(x), p) for x in xs]
    assert all(a <= b for a, b in zip(qs, qs[1:]))


def test_grid_saturation():
    p = qparams_from_range(-1.0, 1.0, 8)
    assert quantize(50.0, p) == 127
    assert quantize(-50.0, p) == -128
    assert quantize(float("inf"), p) == 127
    assert quantize(float("-inf"), p) == -128
    with pytest.raises(ValueError):
        quantize(float("nan"), p)


def test_zero_is_exact_after_anchoring(rng):
    for _ in range(200):
        m = float(rng.uniform(-10, 10))
        M = m + float(rng.uniform(0, 20))
        p = qparams_zero_anchored(m, M, 8)
        assert dequantize(quantize(0.0, p), p) == 0.0


def test_array_matches_scalar(rng):
    p = qparams_zero_anchored(-2.5, 7.0, 6)
    xs = rng.uniform(-3, 8, 300)
    qa = quantize_array(xs, p)
    assert [quantize(float(x), p) for x in xs] == qa.tolist()
    np.testing.assert_allclose(
        dequantize_array(qa, p), [dequantize(int(q), p) for q in qa]
    )


def test_quantize_with_reuses_params(rng):
    a = rng.normal(size=(2, 3, 3))
    qt = quantize_tensor(Tensor.from_array(a), "channel", 8)
    again = quantize_with(a, qt.params)
    np.testing.assert_array_equal(again.data, qt.data)
    assert again.params is qt.params


def test_dequantize_tensor_round_trip(rng):
    a = rng.uniform(-1, 1, size=(4, 5))
    qt = quantize_tensor(Tensor.from_array(a), "tensor", 12)
    back = dequantize_tensor(qt).array()
    assert np.max(np.abs(back - a)) <= qt.params.scale / 2 + 4 * ulp(1.0)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        qparams_from_range(1.0, 0.0, 8)  # empty range
    with pytest.raises(ValueError):
        qparams_from_range(0.0, 1.0, 1)  # bit-width floor
    with pytest.raises(ValueError):
        QuantParams(0.0, 0, 8)  # scale must be positive
    with pytest.raises(ValueError):
        QuantParams(1.0, 999, 8)  # zero-point off the grid
    with pytest.raises(ValueError):
        ChannelQuantParams(())
