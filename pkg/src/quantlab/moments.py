"""Predicting a layer's output statistics from its weight statistics.

Treating the trained weights of one layer as draws from a common scalar
distribution with mean mu_W and variance var_W yields closed forms for each
output entry of a fully connected layer

    E[y]   = mu_W  * sum_i x_i
    Var[y] = var_W * sum_i x_i^2

and, per output position (i, j) and output channel v of a convolution, the
same forms over the input window (padded taps contribute zero). Window sums
are evaluated on a sparse lattice of output positions with spacing ceil(gamma)
— always including (0, 0) — which cuts the estimation cost quadratically in
gamma. Position estimates are then pooled into one range model per tensor or
per channel, an interval [mean - alpha*sigma, mean + beta*sigma] is placed
around the pooled moments, and (alpha, beta) are fitted on calibration data to
reach a target coverage.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .nn import conv_output_hw
from .tensor import Tensor

TOTAL_VARIANCE = "total-variance"
AS_PRINTED = "as-printed"

# Calibration searches alpha, beta on this grid, preferring small alpha+beta,
# then small |alpha-beta|, then small alpha.
ALPHA_BETA_STEP = 0.25
ALPHA_BETA_MAX = 8.0


@dataclass(frozen=True)
class WeightStats:
    """Empirical first and second moments of one layer's weight tensor.

    `mode` is "tensor" (single pooled mean/var) or "channel" (one pair per
    output channel, axis 0 of the weight tensor). Variances are population
    variances.
    """

    mode: str
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if self.mode not in ("tensor", "channel"):
            raise ValueError(f"unknown stats mode {self.mode!r}")
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError("mean/var must be 1-D arrays of equal length")
        if self.mode == "tensor" and mean.size != 1:
            raise ValueError("tensor-mode stats hold exactly one mean/var pair")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def num_channels(self) -> int:
        return self.mean.size


def fit_weight_stats(w: Tensor, mode: str = "tensor") -> WeightStats:
    """Fit moments of a weight tensor, pooled or per output channel (axis 0)."""
    a = w.array()
    if mode == "tensor":
        return WeightStats("tensor", np.array([a.mean()]), np.array([a.var()]))
    if mode != "channel":
        raise ValueError(f"unknown stats mode {mode!r}")
    if w.ndim < 2:
        raise ValueError("per-channel stats need a >= 2-D weight tensor")
    flat = a.reshape(a.shape[0], -1)
    return WeightStats("channel", flat.mean(axis=1), flat.var(axis=1))


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    var: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.mean) and np.isfinite(self.var)):
            raise ValueError("estimate must be finite")
        if self.var < 0:
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class StrideConfig:
    """Spatial sampling stride gamma for the conv estimator."""

    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma}")


@dataclass
class MacCounter:
    """Counts the multiply-accumulates an estimator actually performs."""

    macs: int = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


def lattice_positions(extent: int, gamma: float) -> np.ndarray:
    """Sampled indices {0, ceil(gamma), 2*ceil(gamma), ...} below `extent`."""
    step = math.ceil(gamma)
    return np.arange(0, extent, step)


@dataclass(frozen=True)
class ConvEstimates:
    """Per-position (and per-channel) output moments of one conv layer.

    `means`/`vars` have shape (n_positions, C) where C is 1 for tensor-mode
    weight stats and the output channel count for channel mode.
    """

    positions: tuple[tuple[int, int], ...]
    means: np.ndarray
    vars: np.ndarray

    @property
    def num_channels(self) -> int:
        return self.means.shape[1]

    def with_bias(self, bias: np.ndarray | None) -> "ConvEstimates":
        """Shift means by a per-channel bias; variances are unchanged.

        Tensor-mode estimates (C == 1) broadcast against the bias so the
        cross-channel spread of the bias still reaches the pooled range model.
        """
        if bias is None:
            return self
        b = np.asarray(bias, dtype=np.float64).reshape(1, -1)
        means = self.means + b
        varr = np.broadcast_to(self.vars, means.shape).copy()
        return ConvEstimates(self.positions, means, varr)


def estimate_linear(x: Tensor, ws: WeightStats, counter: MacCounter | None = None) -> MomentEstimate:
    """Output moments of a fully connected layer for input vector x.

    Requires tensor-mode stats: after the i.i.d. weight simplification the
    estimate has no output-feature index, so one pair serves every output.
    Costs 2*d multiply-accumulates (the two input sums).
    """
    if ws.mode != "tensor":
        raise ValueError("estimate_linear takes tensor-mode weight stats")
    v = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64).reshape(-1)
    if counter is not None:
        counter.add(2 * v.size)
    s1 = float(np.sum(v))
    s2 = float(np.sum(v * v))
    return MomentEstimate(float(ws.mean[0]) * s1, float(ws.var[0]) * s2)


def estimate_conv(
    x: Tensor,
    ws: WeightStats,
    kernel: tuple[int, int],
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
    gamma: StrideConfig | float = 1.0,
    counter: MacCounter | None = None,
) -> ConvEstimates:
    """Output moments of a convolution at lattice-sampled output positions.

    The input is one (C, H, W) image. For each sampled output position the
    window sums sum(x) and sum(x^2) are accumulated tap by tap in channel,
    row, column order — the same deterministic order a direct triple loop
    uses, so gamma=1 results are reproducible bit for bit. Sums are shared
    across output channels; channel-mode stats only rescale them, which keeps
    the estimator cost independent of the output channel count.

    A gamma too large for the output resolution is clamped, with a
    warning, to the largest spacing that still keeps two lattice rows and
    columns (the map corners); a single sampled position would drop the
    position-spread term from every downstream aggregate.
    """
    g = gamma.gamma if isinstance(gamma, StrideConfig) else float(gamma)
    StrideConfig(g)  # validates positivity/finiteness
    a = x.array()
    if a.ndim != 3:
        raise ValueError(f"estimate_conv expects a (C, H, W) input, got shape {x.shape}")
    c, h, w = a.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    limit = float(max(1, max(oh, ow) - 1))
    if g > limit:
        warnings.warn(f"gamma {g} exceeds output resolution; clamped to {limit}", stacklevel=2)
        g = limit
    if ph or pw:
        a = np.pad(a, ((0, 0), (ph, ph), (pw, pw)))
    lat_i = lattice_positions(oh, g)
    lat_j = lattice_positions(ow, g)
    rows = lat_i * sh
    cols = lat_j * sw
    s1 = np.zeros((lat_i.size, lat_j.size))
    s2 = np.zeros((lat_i.size, lat_j.size))
    for r in range(c):  # tap order fixed: channel, kernel row, kernel column
        plane = a[r]
        for q in range(kh):
            for t in range(kw):
                v = plane[np.ix_(rows + q, cols + t)]
                s1 = s1 + v
                s2 = s2 + v * v
    if counter is not None:
        counter.add(lat_i.size * lat_j.size * c * kh * kw * 2)
    positions = tuple((int(i), int(j)) for i in lat_i for j in lat_j)
    flat1 = s1.reshape(-1, 1)
    flat2 = s2.reshape(-1, 1)
    return ConvEstimates(positions, ws.mean[None, :] * flat1, ws.var[None, :] * flat2)


def _pool(means: np.ndarray, varr: np.ndarray, formula: str) -> MomentEstimate:
    e = float(means.mean())
    if formula == TOTAL_VARIANCE:
        v = float(np.mean(varr + (means - e) ** 2))
    elif formula == AS_PRINTED:
        # Literal published form: squared variance term, no 1/N on the sum.
        v = float(np.sum(varr**2 + (means - e) ** 2))
    else:
        raise ValueError(f"unknown aggregation formula {formula!r}")
    return MomentEstimate(e, v)


def aggregate(
    estimates: ConvEstimates | Sequence[MomentEstimate],
    granularity: str = "tensor",
    formula: str = TOTAL_VARIANCE,
) -> MomentEstimate | list[MomentEstimate]:
    """Pool position estimates into one range model per tensor or per channel.

    The default pooling reads the spread of position means as a dispersion
    term on top of the mean within-position variance (law of total variance,
    uniform position mixture). `formula="as-printed"` reproduces the literal
    published aggregation instead.
    """
    if isinstance(estimates, ConvEstimates):
        means, varr = estimates.means, estimates.vars
    else:
        if not estimates:
            raise ValueError("nothing to aggregate")
        means = np.array([[e.mean] for e in estimates])
        varr = np.array([[e.var] for e in estimates])
    if granularity == "tensor":
        return _pool(means.reshape(-1), varr.reshape(-1), formula)
    if granularity != "channel":
        raise ValueError(f"unknown granularity {granularity!r}")
    return [_pool(means[:, v], varr[:, v], formula) for v in range(means.shape[1])]


@dataclass(frozen=True)
class IntervalParams:
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def interval(est: MomentEstimate, ip: IntervalParams) -> tuple[float, float]:
    """Range [mean - alpha*sigma, mean + beta*sigma] predicted by an estimate."""
    sigma = math.sqrt(est.var)
    return est.mean - ip.alpha * sigma, est.mean + ip.beta * sigma


def coverage(values: Tensor | np.ndarray, lo: float, hi: float) -> float:
    """Fraction of entries inside the closed interval [lo, hi]."""
    a = values.data if isinstance(values, Tensor) else np.asarray(values).reshape(-1)
    if a.size == 0:
        raise ValueError("coverage of an empty tensor is undefined")
    return float(np.count_nonzero((a >= lo) & (a <= hi)) / a.size)


def alpha_beta_candidates() -> list[tuple[float, float]]:
    """Grid candidates in calibration preference order."""
    steps = np.arange(0.0, ALPHA_BETA_MAX + ALPHA_BETA_STEP / 2, ALPHA_BETA_STEP)
    return sorted(product(steps, steps), key=lambda ab: (ab[0] + ab[1], abs(ab[0] - ab[1]), ab[0]))


def _normalized_residuals(
    y: np.ndarray, ests: MomentEstimate | Sequence[MomentEstimate]
) -> np.ndarray:
    """(y - mean)/sigma entries; zero-variance estimates map exact hits to 0."""
    if isinstance(ests, MomentEstimate):
        groups = [(y.reshape(-1), ests)]
    else:
        if y.shape[0] != len(ests):
            raise ValueError("per-channel estimates must match the channel axis")
        groups = [(y[ch].reshape(-1), e) for ch, e in enumerate(ests)]
    out = []
    for vals, e in groups:
        sigma = math.sqrt(e.var)
        if sigma == 0.0:
            hit = np.abs(vals - e.mean) <= 1e-9 * (1.0 + abs(e.mean))
            signed = np.where(vals > e.mean, np.inf, -np.inf)
            out.append(np.where(hit, 0.0, signed))
        else:
            out.append((vals - e.mean) / sigma)
    return np.concatenate(out)


def calibrate_alpha_beta(
    preacts: Sequence[Tensor | np.ndarray],
    estimates: Sequence[MomentEstimate | Sequence[MomentEstimate]],
    target: float = 0.999,
) -> IntervalParams:
    """Smallest grid (alpha, beta) whose mean calibration coverage hits target.

    `preacts[i]` holds sample i's true pre-activations and `estimates[i]` the
    matching estimate (a list of per-channel estimates aligns with axis 0).
    All samples share one layer shape, so the mean of per-sample coverages
    equals the pooled fraction over normalized residuals, which is what the
    grid walk evaluates. If even the grid corner cannot reach the target it is
    returned anyway, with a warning.
    """
    if not 0 < target <= 1:
        raise ValueError(f"coverage target must be in (0, 1], got {target}")
    if len(preacts) != len(estimates) or not preacts:
        raise ValueError("need one estimate per calibration sample")
    res = []
    for y, e in zip(preacts, estimates):
        a = y.array() if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
        res.append(_normalized_residuals(a, e))
    pooled = np.sort(np.concatenate(res))
    n = pooled.size
    for a, b in alpha_beta_candidates():
        covered = np.searchsorted(pooled, b, side="right") - np.searchsorted(
            pooled, -a, side="left"
        )
        if covered / n >= target:
            return IntervalParams(a, b)
    warnings.warn(
        f"coverage target {target} unreachable on the grid; returning the corner", stacklevel=2
    )
    return IntervalParams(ALPHA_BETA_MAX, ALPHA_BETA_MAX)
