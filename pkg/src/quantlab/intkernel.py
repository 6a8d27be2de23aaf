"""Integer-only execution path mirroring embedded s8 kernels.

Layers run on 8-bit payloads with 32-bit accumulation of
(q_x - z_x) * (q_w - z_w) plus a widened bias, then requantize onto the output
grid through a fixed-point multiplier (a 31-bit mantissa and a shift) with
round-half-to-even. The moment estimator has an integer twin built on 64-bit
window sums, fixed-point rescaling, and a Newton-Raphson integer square root,
so output ranges can be predicted without leaving integer arithmetic.

Activations are per-tensor here (a scalar input scale is what makes one
requantization multiplier per output channel possible); weights may be
per-tensor or per-channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moments import (
    IntervalParams,
    MacCounter,
    MomentEstimate,
    StrideConfig,
    WeightStats,
    lattice_positions,
)
from .nn import conv_output_hw, im2col
from .quant import (
    ChannelQuantParams,
    QuantParams,
    QuantizedTensor,
    grid_bounds,
    qparams_from_range,
)
from .tensor import Tensor

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
MAX_FAN_IN = 1 << 15  # taps per accumulator the 32-bit contract guarantees

# Binary points of the integer moment estimates.
MEAN_FRAC_BITS = 16  # mean_fx counts units of 2^-16
VAR_FRAC_BITS = 32  # var_fx counts units of 2^-32; isqrt lands on 2^-16


def rounding_rshift(v: int, k: int) -> int:
    """v / 2^k rounded half to even, for any Python int and k >= 1."""
    q, r = divmod(v, 1 << k)
    half = 1 << (k - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def div_round_half_even(num: int, den: int) -> int:
    """num / den rounded half to even; den must be positive."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    q, r = divmod(num, den)
    if 2 * r > den or (2 * r == den and q & 1):
        q += 1
    return q


@dataclass(frozen=True)
class FixedPointMultiplier:
    """Positive real factor r as multiplier * 2^(shift-31), multiplier in [2^30, 2^31)."""

    multiplier: int
    shift: int

    def __post_init__(self) -> None:
        if not (1 << 30) <= self.multiplier < (1 << 31):
            raise ValueError(f"multiplier {self.multiplier} outside [2^30, 2^31)")

    @classmethod
    def encode(cls, r: float) -> "FixedPointMultiplier":
        if not (r > 0.0 and math.isfinite(r)):
            raise ValueError(f"can only encode a positive finite real, got {r}")
        frac, exp = math.frexp(r)  # r = frac * 2^exp, frac in [0.5, 1)
        m = round(frac * (1 << 31))
        if m == 1 << 31:
            m >>= 1
            exp += 1
        return cls(m, exp)

    def value(self) -> float:
        """The real factor actually encoded (relative error <= 2^-30 vs r)."""
        return self.multiplier * 2.0 ** (self.shift - 31)

    def apply(self, x: int) -> int:
        """round_half_even(x * r) using only integer operations."""
        prod = int(x) * self.multiplier
        k = 31 - self.shift
        if k <= 0:
            return prod << (-k)
        return rounding_rshift(prod, k)

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`apply`; |x| must stay within the 32-bit contract."""
        prod = x.astype(np.int64) * np.int64(self.multiplier)  # |prod| < 2^62
        k = 31 - self.shift
        if k <= 0:
            return prod << (-k)
        q = prod >> k
        r = prod - (q << k)
        half = np.int64(1 << (k - 1))
        q = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
        return q


def isqrt(n: int) -> int:
    """floor(sqrt(n)) for unsigned 64-bit range via Newton-Raphson.

    Starts from 1 << ((bit_length(n) + 1) // 2), which upper-bounds the root,
    and iterates x <- (x + n // x) // 2 until it stops decreasing; the final
    downward adjustment is at most one step.
    """
    if n < 0:
        raise ValueError("isqrt of a negative number")
    if n == 0:
        return 0
    x = 1 << ((n.bit_length() + 1) // 2)
    while True:
        y = (x + n // x) // 2
        if y >= x:
            break
        x = y
    if x * x > n:
        x -= 1
    return x


def requantize(acc: int, fpm: FixedPointMultiplier, z_out: int, bit_width: int) -> int:
    """Map one widened accumulator onto the output grid."""
    lo, hi = grid_bounds(bit_width)
    return max(lo, min(hi, fpm.apply(acc) + z_out))


def _requantize_array(
    acc: np.ndarray, fpm: FixedPointMultiplier, z_out: int, bit_width: int
) -> np.ndarray:
    lo, hi = grid_bounds(bit_width)
    return np.clip(fpm.apply_array(acc) + z_out, lo, hi)


def widen_bias(bias: Tensor | None, s_x: float, w_params: QuantParams | ChannelQuantParams, n: int):
    """Bias as 32-bit integers on the accumulator scale s_x * s_w (per channel)."""
    if bias is None:
        return np.zeros(n, dtype=np.int64)
    s_w = w_params.scales() if isinstance(w_params, ChannelQuantParams) else np.full(
        n, w_params.scale
    )
    b = np.rint(bias.array() / (s_x * s_w)).astype(np.int64)
    if b.min() < INT32_MIN or b.max() > INT32_MAX:
        raise OverflowError("widened bias leaves the 32-bit accumulator range")
    return b


def _check_input(x_q: QuantizedTensor) -> QuantParams:
    if not isinstance(x_q.params, QuantParams):
        raise ValueError("integer kernels take per-tensor activation params")
    return x_q.params


def _weight_scales_zps(w_q: QuantizedTensor, n: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(w_q.params, QuantParams):
        return np.full(n, w_q.params.scale), np.full(n, w_q.params.zero_point, dtype=np.int64)
    if w_q.params.axis != 0 or w_q.params.num_channels != n:
        raise ValueError("per-channel weight params must sit on the output axis")
    return w_q.params.scales(), w_q.params.zero_points()


def _check_acc(acc: np.ndarray, fan_in: int) -> np.ndarray:
    if fan_in > MAX_FAN_IN:
        raise OverflowError(f"fan-in {fan_in} exceeds the guarded {MAX_FAN_IN} taps")
    if acc.min() < INT32_MIN or acc.max() > INT32_MAX:
        raise OverflowError("accumulator left the 32-bit range")
    return acc


def accumulate_linear_int(
    x_q: QuantizedTensor, w_q: QuantizedTensor, bias_int: np.ndarray | None
) -> np.ndarray:
    """(q_x - z_x) dot (q_w - z_w) per output feature, plus widened bias."""
    z_x = _check_input(x_q).zero_point
    w = w_q.array()
    h, d = w.shape
    _, z_w = _weight_scales_zps(w_q, h)
    acc = (w - z_w[:, None]) @ (x_q.array() - z_x)
    if bias_int is not None:
        acc = acc + bias_int
    return _check_acc(acc, d)


def accumulate_conv_int(
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    bias_int: np.ndarray | None,
    stride: tuple[int, int],
    padding: tuple[int, int],
) -> tuple[np.ndarray, int, int]:
    """Integer conv accumulators, shape (out_h * out_w, out_ch).

    Padding enters as the input zero-point, so padded taps contribute zero
    after centering.
    """
    z_x = _check_input(x_q).zero_point
    l, p, kh, kw = w_q.shape
    patches, oh, ow = im2col(x_q.array(), (kh, kw), stride, padding, pad_value=z_x)
    _, z_w = _weight_scales_zps(w_q, l)
    w2d = w_q.array().reshape(l, p * kh * kw)
    acc = (patches - z_x) @ (w2d - z_w[:, None]).T
    if bias_int is not None:
        acc = acc + bias_int[None, :]
    return _check_acc(acc, p * kh * kw), oh, ow


def _output_channel_params(out_params: QuantParams | ChannelQuantParams, n: int):
    if isinstance(out_params, QuantParams):
        return np.full(n, out_params.scale), np.full(n, out_params.zero_point, dtype=np.int64)
    if out_params.num_channels != n:
        raise ValueError("output channel params do not match the layer")
    return out_params.scales(), out_params.zero_points()


def requantize_columns(
    acc: np.ndarray,
    s_x: float,
    w_q: QuantizedTensor,
    out_params: QuantParams | ChannelQuantParams,
    bit_width: int,
) -> np.ndarray:
    """Requantize an (entries, out_channels) accumulator block column by column."""
    n = acc.shape[1]
    s_w, _ = _weight_scales_zps(w_q, n)
    s_out, z_out = _output_channel_params(out_params, n)
    out = np.empty_like(acc)
    for v in range(n):
        fpm = FixedPointMultiplier.encode(s_x * s_w[v] / s_out[v])
        out[:, v] = _requantize_array(acc[:, v], fpm, int(z_out[v]), bit_width)
    return out


def linear_s8(
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    bias_int: np.ndarray | None,
    out_params: QuantParams | ChannelQuantParams,
) -> QuantizedTensor:
    """Fully connected layer on integer payloads."""
    acc = accumulate_linear_int(x_q, w_q, bias_int)
    if not isinstance(out_params, QuantParams):
        raise ValueError("1-D linear outputs take per-tensor params")
    q = requantize_columns(acc[None, :], x_q.params.scale, w_q, out_params, out_params.bit_width)
    return QuantizedTensor((acc.size,), q.reshape(-1), out_params)


def conv2d_s8(
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    bias_int: np.ndarray | None,
    out_params: QuantParams | ChannelQuantParams,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> QuantizedTensor:
    """2-D convolution on integer payloads."""
    acc, oh, ow = accumulate_conv_int(x_q, w_q, bias_int, stride, padding)
    l = acc.shape[1]
    q = requantize_columns(acc, x_q.params.scale, w_q, out_params, out_params.bit_width)
    return QuantizedTensor((l, oh, ow), q.T.reshape(-1), out_params)


# ---------------------------------------------------------------------------
# Integer moment estimator


@dataclass(frozen=True)
class IntMomentEstimate:
    """Output moments on fixed binary points: mean in 2^-16, var in 2^-32 units."""

    mean_fx: int
    var_fx: int

    def to_moments(self) -> MomentEstimate:
        return MomentEstimate(
            self.mean_fx * 2.0**-MEAN_FRAC_BITS, self.var_fx * 2.0**-VAR_FRAC_BITS
        )


class _SignedScale:
    """Fixed-point encoding of a signed real factor (zero allowed)."""

    def __init__(self, r: float):
        self.sign = (r > 0) - (r < 0)
        self.fpm = FixedPointMultiplier.encode(abs(r)) if r != 0.0 else None

    def apply(self, x: int) -> int:
        if self.fpm is None:
            return 0
        return self.sign * self.fpm.apply(x)  # half-even rounding is sign-symmetric


def _centered_sums(q: np.ndarray, z: int) -> tuple[int, int]:
    """Exact integer sum(q - z) and sum((q - z)^2) over a tap set."""
    c = q.astype(np.int64) - z
    return int(c.sum()), int((c * c).sum())


def _agg_int(means: list[int], varis: list[int]) -> IntMomentEstimate:
    """Integer total-variance pooling on the fixed binary points."""
    n = len(means)
    e_fx = div_round_half_even(sum(means), n)
    total = sum(v + (m - e_fx) ** 2 for m, v in zip(means, varis))
    return IntMomentEstimate(e_fx, div_round_half_even(total, n))


def _bias_fx(bias: np.ndarray | None) -> list[int] | None:
    if bias is None:
        return None
    return [round(float(b) * (1 << MEAN_FRAC_BITS)) for b in np.asarray(bias).reshape(-1)]


def estimate_moments_int(
    x_q: QuantizedTensor,
    ws: WeightStats,
    kernel: tuple[int, int] | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
    gamma: StrideConfig | float = 1.0,
    bias: np.ndarray | None = None,
    counter: MacCounter | None = None,
) -> list[IntMomentEstimate]:
    """Integer twin of the real-arithmetic moment estimator.

    For a 1-D input the whole vector is summed; for a (C, H, W) input with a
    conv `kernel`, window sums are taken at the lattice-sampled output
    positions and pooled per stats channel with the total-variance formula,
    entirely in integer/fixed-point arithmetic. Returns one estimate per
    stats channel (a single-element list in tensor mode).

    A per-output-channel bias shifts the modeled means before pooling: per
    channel when the stats have channels, across the position x channel grid
    when tensor-mode stats meet a multi-channel bias.

    The weight statistics (and bias) are folded with the input scale into
    fixed-point integers up front; everything after the fold is integer-only.
    """
    p = _check_input(x_q)
    s_x = p.scale
    mean_scales = [
        _SignedScale(float(m) * s_x * (1 << MEAN_FRAC_BITS)) for m in ws.mean
    ]
    var_scales = [
        _SignedScale(float(v) * s_x * s_x * (1 << VAR_FRAC_BITS)) for v in ws.var
    ]
    b_fx = _bias_fx(bias)
    if b_fx is not None and len(mean_scales) > 1 and len(b_fx) != len(mean_scales):
        raise ValueError("bias length does not match channel-mode stats")
    if kernel is None:
        if len(x_q.shape) != 1:
            raise ValueError("vector estimation needs a 1-D input")
        if ws.mode != "tensor":
            raise ValueError("vector estimation takes tensor-mode stats")
        if counter is not None:
            counter.add(2 * x_q.data.size)
        s1, s2 = _centered_sums(x_q.array(), p.zero_point)
        m0 = mean_scales[0].apply(s1)
        v0 = max(0, var_scales[0].apply(s2))
        if b_fx is None:
            return [IntMomentEstimate(m0, v0)]
        return [_agg_int([m0 + b for b in b_fx], [v0] * len(b_fx))]
    if len(x_q.shape) != 3:
        raise ValueError("conv estimation needs a (C, H, W) input")
    g = gamma.gamma if isinstance(gamma, StrideConfig) else float(gamma)
    a = x_q.array()
    oh, ow = conv_output_hw(a.shape[1], a.shape[2], kernel, stride, padding)
    g = min(g, float(max(1, max(oh, ow) - 1)))  # same clamp as the real estimator
    patches, _, _ = im2col(a, kernel, stride, padding, pad_value=p.zero_point)
    lat_i = lattice_positions(oh, g)
    lat_j = lattice_positions(ow, g)
    rows = (lat_i[:, None] * ow + lat_j[None, :]).reshape(-1)
    if counter is not None:
        counter.add(rows.size * a.shape[0] * kernel[0] * kernel[1] * 2)
    centered = patches[rows].astype(np.int64) - p.zero_point
    s1s = centered.sum(axis=1)
    s2s = (centered * centered).sum(axis=1)
    out = []
    for c_idx, (ms, vs) in enumerate(zip(mean_scales, var_scales)):
        means = [ms.apply(int(s1)) for s1 in s1s]
        varis = [max(0, vs.apply(int(s2))) for s2 in s2s]
        if b_fx is not None:
            if len(mean_scales) == 1 and len(b_fx) > 1:
                # Tensor-mode stats, per-channel bias: pool the full grid of
                # position x channel means so the bias spread reaches the
                # dispersion term.
                means = [m + b for m in means for b in b_fx]
                varis = [v for v in varis for _ in b_fx]
            else:
                means = [m + b_fx[c_idx if len(b_fx) > 1 else 0] for m in means]
        out.append(_agg_int(means, varis))
    return out


def int_interval_params(
    est: IntMomentEstimate, ip: IntervalParams, bit_width: int
) -> QuantParams:
    """Quantization parameters from an integer estimate, integer arithmetic only.

    alpha/beta live on the quarter-step calibration grid, so alpha*sigma is an
    exact integer multiply followed by a rounding shift. The derived range is
    anchored at zero like every other range in the engine; the stored scale is
    the only value converted back to a float at the end.
    """
    sigma_fx = isqrt(est.var_fx)  # lands on the 2^-16 mean grid
    a4, b4 = round(ip.alpha * 4), round(ip.beta * 4)
    lo_fx = est.mean_fx - rounding_rshift(a4 * sigma_fx, 2)
    hi_fx = est.mean_fx + rounding_rshift(b4 * sigma_fx, 2)
    lo_fx = min(lo_fx, 0)
    hi_fx = max(hi_fx, 0)
    if hi_fx == lo_fx:
        return qparams_from_range(0.0, 0.0, bit_width)
    levels = (1 << bit_width) - 1
    s_out = (hi_fx - lo_fx) * 2.0**-MEAN_FRAC_BITS / levels
    lo_grid, hi_grid = grid_bounds(bit_width)
    z = -div_round_half_even(lo_fx * levels, hi_fx - lo_fx) - (1 << (bit_width - 1))
    return QuantParams(s_out, min(max(z, lo_grid), hi_grid), bit_width)
