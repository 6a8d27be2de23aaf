"""Affine quantization between reals and signed integer grids.

A bit-width b maps reals onto the signed grid [-2^(b-1), 2^(b-1)-1] through

    q = clamp(round(x / s) + z)        (round half to even)
    x_hat = s * (q - z)

with scale s > 0 and integer zero-point z on the grid. Parameters for a range
[m, M] come from

    s = (M - m) / (2^b - 1)
    z = clamp(-round(m / s) - 2^(b-1))

For m <= 0 <= M the zero-point always lands on the grid and real 0 is exactly
representable, which is what quantized zero-padding relies on. Range-derived
parameters therefore go through :func:`qparams_zero_anchored`, which widens a
range just enough to contain 0 before applying the formulas above; extreme
one-sided ranges fed directly to :func:`qparams_from_range` keep validity via
the clamp at the cost of one-sided saturation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

# Scale floor for degenerate (M == m) ranges: keeps s positive and the
# constant representable once the range has been anchored at zero.
DEGENERATE_SCALE_STEP = 2.0**-20

Granularity = str  # "tensor" | "channel"
PER_TENSOR = "tensor"
PER_CHANNEL = "channel"


def grid_bounds(bit_width: int) -> tuple[int, int]:
    """Inclusive (lo, hi) of the signed integer grid for a bit-width."""
    if not 2 <= bit_width <= 16:
        raise ValueError(f"bit-width must be in [2, 16], got {bit_width}")
    half = 1 << (bit_width - 1)
    return -half, half - 1


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and bit-width of one affine quantizer."""

    scale: float
    zero_point: int
    bit_width: int

    def __post_init__(self) -> None:
        lo, hi = grid_bounds(self.bit_width)
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero-point {self.zero_point} off the {self.bit_width}-bit grid")


@dataclass(frozen=True)
class ChannelQuantParams:
    """One QuantParams per channel slice along `axis`, sharing a bit-width."""

    per_channel: tuple[QuantParams, ...]
    axis: int = 0

    def __post_init__(self) -> None:
        if not self.per_channel:
            raise ValueError("need at least one channel")
        widths = {p.bit_width for p in self.per_channel}
        if len(widths) != 1:
            raise ValueError(f"channels disagree on bit-width: {sorted(widths)}")

    @property
    def bit_width(self) -> int:
        return self.per_channel[0].bit_width

    @property
    def num_channels(self) -> int:
        return len(self.per_channel)

    def scales(self) -> np.ndarray:
        return np.array([p.scale for p in self.per_channel])

    def zero_points(self) -> np.ndarray:
        return np.array([p.zero_point for p in self.per_channel], dtype=np.int64)


AnyQuantParams = QuantParams | ChannelQuantParams


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer payload plus the parameters that map it back to reals."""

    shape: tuple[int, ...]
    data: np.ndarray  # flat int64, every entry on the grid
    params: AnyQuantParams

    def __post_init__(self) -> None:
        buf = np.array(self.data, dtype=np.int64).reshape(-1)
        if buf.size != int(np.prod(self.shape)):
            raise ValueError("payload length does not match shape")
        lo, hi = grid_bounds(self.params.bit_width)
        if buf.size and (buf.min() < lo or buf.max() > hi):
            raise ValueError(f"payload leaves the {self.params.bit_width}-bit grid")
        if isinstance(self.params, ChannelQuantParams):
            ax = self.params.axis
            if len(self.shape) < 2:
                raise ValueError("per-channel payload needs a >= 2-D shape")
            if self.shape[ax] != self.params.num_channels:
                raise ValueError("channel count does not match params")
        buf.setflags(write=False)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "data", buf)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def bit_width(self) -> int:
        return self.params.bit_width


def qparams_from_range(m: float, M: float, bit_width: int) -> QuantParams:
    """Parameters covering [m, M] on the signed grid.

    Degenerate ranges (M == m) get the floor scale max(|M|, 1) * 2^-20 with the
    zero-point pinned at the grid bottom.
    """
    if not (math.isfinite(m) and math.isfinite(M)):
        raise ValueError("range endpoints must be finite")
    if M < m:
        raise ValueError(f"empty range [{m}, {M}]")
    lo, hi = grid_bounds(bit_width)
    if M == m:
        return QuantParams(max(abs(M), 1.0) * DEGENERATE_SCALE_STEP, lo, bit_width)
    s = (M - m) / ((1 << bit_width) - 1)
    z = -round(m / s) - (1 << (bit_width - 1))
    return QuantParams(s, min(max(z, lo), hi), bit_width)


def qparams_zero_anchored(m: float, M: float, bit_width: int) -> QuantParams:
    """Range-derived parameters with the range first widened to contain 0."""
    return qparams_from_range(min(float(m), 0.0), max(float(M), 0.0), bit_width)


def quantize(x: float, p: QuantParams) -> int:
    """Map one real onto the grid; saturates out-of-range inputs."""
    lo, hi = grid_bounds(p.bit_width)
    v = x / p.scale
    try:
        q = round(v) + p.zero_point  # round() on floats is half-to-even
    except (OverflowError, ValueError):
        if math.isnan(v):
            raise ValueError("cannot quantize NaN") from None
        q = hi + 1 if v > 0 else lo - 1
    return min(max(q, lo), hi)


def dequantize(q: int, p: QuantParams) -> float:
    return p.scale * (q - p.zero_point)


def quantize_array(a: np.ndarray, p: QuantParams) -> np.ndarray:
    """Vectorized :func:`quantize`; returns int64 on the grid."""
    lo, hi = grid_bounds(p.bit_width)
    q = np.rint(a / p.scale) + p.zero_point
    return np.clip(q, lo, hi).astype(np.int64)


def dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return p.scale * (q.astype(np.float64) - p.zero_point)


def _channel_params(a: np.ndarray, axis: int, bit_width: int) -> ChannelQuantParams:
    moved = np.moveaxis(a, axis, 0)
    per = tuple(
        qparams_zero_anchored(float(sl.min()), float(sl.max()), bit_width)
        for sl in moved.reshape(moved.shape[0], -1)
    )
    return ChannelQuantParams(per, axis=axis)


def quantize_tensor(
    t: Tensor,
    granularity: Granularity,
    bit_width: int,
    axis: int = 0,
) -> QuantizedTensor:
    """Quantize a whole tensor from its own value range.

    Per-tensor: one parameter set from the global min/max. Per-channel: one
    per slice along `axis` (output channels for weight tensors, the channel
    axis for activations), each from that slice's own min/max. Ranges are
    anchored at zero so real 0 stays exactly representable.
    """
    a = t.array()
    if granularity == PER_TENSOR:
        p = qparams_zero_anchored(float(a.min()), float(a.max()), bit_width)
        return QuantizedTensor(t.shape, quantize_array(a, p).reshape(-1), p)
    if granularity != PER_CHANNEL:
        raise ValueError(f"unknown granularity {granularity!r}")
    if t.ndim < 2:
        raise ValueError("per-channel quantization needs a >= 2-D tensor")
    cp = _channel_params(a, axis, bit_width)
    out = np.empty(a.shape, dtype=np.int64)
    moved_in = np.moveaxis(a, axis, 0)
    moved_out = np.moveaxis(out, axis, 0)
    for c, p in enumerate(cp.per_channel):
        moved_out[c] = quantize_array(moved_in[c], p)
    return QuantizedTensor(t.shape, out.reshape(-1), cp)


def quantize_with(a: np.ndarray, params: AnyQuantParams) -> QuantizedTensor:
    """Quantize an array with parameters chosen elsewhere (scheme output path)."""
    if isinstance(params, QuantParams):
        return QuantizedTensor(a.shape, quantize_array(a, params).reshape(-1), params)
    out = np.empty(a.shape, dtype=np.int64)
    moved_in = np.moveaxis(a, params.axis, 0)
    moved_out = np.moveaxis(out, params.axis, 0)
    for c, p in enumerate(params.per_channel):
        moved_out[c] = quantize_array(moved_in[c], p)
    return QuantizedTensor(a.shape, out.reshape(-1), params)


def dequantize_tensor(qt: QuantizedTensor) -> Tensor:
    """Exact reals for every grid entry; inverse of quantize up to grid error."""
    q = qt.array()
    if isinstance(qt.params, QuantParams):
        return Tensor(qt.shape, dequantize_array(q, qt.params).reshape(-1))
    cp = qt.params
    out = np.empty(q.shape, dtype=np.float64)
    moved_in = np.moveaxis(q, cp.axis, 0)
    moved_out = np.moveaxis(out, cp.axis, 0)
    for c, p in enumerate(cp.per_channel):
        moved_out[c] = dequantize_array(moved_in[c], p)
    return Tensor(qt.shape, out.reshape(-1))
