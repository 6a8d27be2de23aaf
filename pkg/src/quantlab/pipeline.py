"""End-to-end quantized execution and batch evaluation.

Inputs are quantized per tensor from their own extrema; conv/linear layers
accumulate at cast precision and requantize onto scheme-chosen output grids;
relu, pooling and flatten act directly on integer payloads. Two arithmetic
paths produce the widened accumulators:

* real emulation (default) — float64 on exactly dequantized operands, with
  the bias widened to the accumulator scale whenever the input is per-tensor,
  so it matches the integer path's bias treatment;
* integer kernels — the s8/i32 path from :mod:`quantlab.intkernel`, including
  the integer moment estimator for the probabilistic scheme.

Each pass also runs the float64 reference forward so per-layer quantization
error, realized interval coverage and the peak number of simultaneously live
widened entries can be reported per sample.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .intkernel import (
    accumulate_conv_int,
    accumulate_linear_int,
    estimate_moments_int,
    int_interval_params,
    requantize_columns,
    widen_bias,
)
from .moments import MacCounter, MomentEstimate, TOTAL_VARIANCE, coverage, interval
from .nn import (
    AVGPOOL,
    CONV2D,
    FLATTEN,
    LINEAR,
    MAXPOOL,
    QUANTIZING_KINDS,
    RELU,
    Dataset,
    Layer,
    ModelGraph,
    forward_float,
    im2col,
)
from .quant import (
    PER_CHANNEL,
    PER_TENSOR,
    ChannelQuantParams,
    QuantParams,
    QuantizedTensor,
    dequantize_tensor,
    qparams_zero_anchored,
    quantize_tensor,
    quantize_with,
)
from .schemes import (
    BEFORE_EVAL,
    DYNAMIC,
    PROBABILISTIC,
    STATIC,
    CalibrationRecord,
    SchemeKind,
    check_record,
    effective_granularity,
    estimate_layer_output,
    output_params,
    params_from_interval,
)
from .tensor import Tensor

THREADS_ENV = "QUANTLAB_THREADS"


def thread_count() -> int:
    """Worker cap for batch evaluation; QUANTLAB_THREADS overrides the default."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return min(8, os.cpu_count() or 1)
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass(frozen=True)
class ForwardResult:
    """Metrics of one quantized pass, keyed by conv/linear layer index."""

    logits: np.ndarray
    prediction: int
    layer_mse: dict[int, float]
    layer_coverage: dict[int, float]
    layer_peak: dict[int, int]
    estimator_macs: int


@dataclass(frozen=True)
class EvalResult:
    scheme: str
    num_samples: int
    accuracy: float
    layer_mse: dict[int, float]
    layer_peak: dict[int, int]
    mean_coverage: float | None
    peak_widened: int
    estimator_macs: int
    predictions: tuple[int, ...]

    @property
    def mean_mse(self) -> float:
        if not self.layer_mse:
            return 0.0
        return float(np.mean(list(self.layer_mse.values())))


def quantize_weights(model: ModelGraph, cfg: SchemeKind) -> dict[int, QuantizedTensor]:
    """Weight payloads per conv/linear layer; depends only on granularity and bits."""
    gran = PER_CHANNEL if cfg.granularity == "channel" else PER_TENSOR
    return {
        idx: quantize_tensor(layer.weights, gran, cfg.bit_width, axis=0)
        for idx, layer in enumerate(model.layers)
        if layer.kind in QUANTIZING_KINDS
    }


def quantize_input(x: Tensor, bit_width: int) -> QuantizedTensor:
    """Inputs always enter per tensor from their own extrema."""
    return quantize_tensor(x, PER_TENSOR, bit_width)


def _div_round_half_even_array(num: np.ndarray, den: int) -> np.ndarray:
    q = num // den  # floor, so the remainder below is always in [0, den)
    r = num - q * den
    return q + ((2 * r > den) | ((2 * r == den) & (q % 2 == 1)))


def _payload_passthrough(layer: Layer, x_q: QuantizedTensor) -> QuantizedTensor:
    """relu / pooling / flatten directly on the integer payload."""
    q = x_q.array()
    if layer.kind == RELU:
        if isinstance(x_q.params, ChannelQuantParams):
            z = x_q.params.zero_points().reshape(-1, *([1] * (q.ndim - 1)))
        else:
            z = x_q.params.zero_point
        return QuantizedTensor(x_q.shape, np.maximum(q, z).reshape(-1), x_q.params)
    if layer.kind in (MAXPOOL, AVGPOOL):
        win = np.lib.stride_tricks.sliding_window_view(q, layer.kernel, axis=(1, 2))
        win = win[:, :: layer.stride[0], :: layer.stride[1]]
        if layer.kind == MAXPOOL:
            out = win.max(axis=(3, 4))
        else:
            out = _div_round_half_even_array(
                win.sum(axis=(3, 4)), layer.kernel[0] * layer.kernel[1]
            )
        return QuantizedTensor(out.shape, out.reshape(-1), x_q.params)
    if layer.kind == FLATTEN:
        if isinstance(x_q.params, ChannelQuantParams):
            return _repack_per_tensor(x_q)
        return QuantizedTensor((x_q.data.size,), x_q.data, x_q.params)
    raise ValueError(f"layer kind {layer.kind} does not run on payloads")


def _repack_per_tensor(x_q: QuantizedTensor) -> QuantizedTensor:
    """Requantize per-channel payloads onto one per-tensor grid (flat shape)."""
    xa = dequantize_tensor(x_q).array().reshape(-1)
    p = qparams_zero_anchored(float(xa.min()), float(xa.max()), x_q.bit_width)
    return quantize_with(xa, p)


def _as_est_list(ests) -> list[MomentEstimate]:
    return [ests] if isinstance(ests, MomentEstimate) else list(ests)


def _coverage_fraction(y: np.ndarray, ests: list[MomentEstimate], ip) -> float:
    if len(ests) == 1:
        lo, hi = interval(ests[0], ip)
        return coverage(y, lo, hi)
    hits = 0
    for c, e in enumerate(ests):
        lo, hi = interval(e, ip)
        hits += int(((y[c] >= lo) & (y[c] <= hi)).sum())
    return hits / y.size


def _weight_scale_vector(w_q: QuantizedTensor, n: int) -> np.ndarray:
    if isinstance(w_q.params, ChannelQuantParams):
        return w_q.params.scales()
    return np.full(n, w_q.params.scale)


def _accumulate_real(layer: Layer, x_q: QuantizedTensor, w_q: QuantizedTensor):
    """Widened accumulators in float64 from exactly dequantized operands.

    Returns (acc, out_shape): conv acc has shape (out_h*out_w, out_ch),
    linear acc is 1-D. With a per-tensor input the bias is first widened to
    the integer accumulator scale, mirroring the integer path; per-channel
    inputs have no single accumulator scale, so the true bias is added.
    """
    x_hat = dequantize_tensor(x_q).array()
    w_hat = dequantize_tensor(w_q).array()
    n = w_hat.shape[0]
    if layer.bias is None:
        bias_eff = None
    elif isinstance(x_q.params, QuantParams):
        s_x = x_q.params.scale
        b_int = widen_bias(layer.bias, s_x, w_q.params, n)
        bias_eff = b_int * s_x * _weight_scale_vector(w_q, n)
    else:
        bias_eff = layer.bias.array()
    if layer.kind == LINEAR:
        acc = w_hat @ x_hat
        if bias_eff is not None:
            acc = acc + bias_eff
        return acc, (n,)
    l, p, kh, kw = w_q.shape
    patches, oh, ow = im2col(x_hat, (kh, kw), layer.stride, layer.padding, 0.0)
    acc = patches @ w_hat.reshape(l, p * kh * kw).T
    if bias_eff is not None:
        acc = acc + bias_eff[None, :]
    return acc, (l, oh, ow)


def _widened_view(acc: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    if len(out_shape) == 1:
        return acc
    l, oh, ow = out_shape
    return acc.T.reshape(l, oh, ow)


def _run_kernel_layer(
    cfg: SchemeKind,
    record: CalibrationRecord | None,
    idx: int,
    layer: Layer,
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    counter: MacCounter,
    int_kernels: bool,
) -> tuple[QuantizedTensor, float | None, int]:
    """One conv/linear layer end to end: accumulate, choose params, requantize.

    Returns (output, realized coverage or None, peak widened entries).
    """
    cov = None
    ests_real = None
    if int_kernels:
        if isinstance(x_q.params, ChannelQuantParams):
            x_q = _repack_per_tensor(x_q)
        n = layer.weights.shape[0]
        bias_int = (
            widen_bias(layer.bias, x_q.params.scale, w_q.params, n)
            if layer.bias is not None
            else None
        )
        if layer.kind == CONV2D:
            acc, oh, ow = accumulate_conv_int(x_q, w_q, bias_int, layer.stride, layer.padding)
            out_shape = (n, oh, ow)
        else:
            acc, out_shape = accumulate_linear_int(x_q, w_q, bias_int), (n,)
        s_w = _weight_scale_vector(w_q, n)
        y_wid = _widened_view(acc.astype(np.float64) * x_q.params.scale * s_w, out_shape)
    else:
        acc, out_shape = _accumulate_real(layer, x_q, w_q)
        y_wid = _widened_view(acc, out_shape)

    if cfg.scheme == PROBABILISTIC:
        cal = record.layer(idx)
        ip = cal.interval_params()
        bias = layer.bias.array() if layer.bias is not None else None
        if int_kernels:
            kernel = layer.weights.shape[2:] if layer.kind == CONV2D else None
            ests_int = estimate_moments_int(
                x_q,
                cal.weight_stats,
                kernel=kernel,
                stride=layer.stride or (1, 1),
                padding=layer.padding or (0, 0),
                gamma=cal.gamma or 1.0,
                bias=bias,
                counter=counter,
            )
            ests_list = [e.to_moments() for e in ests_int]
            if len(ests_int) == 1:
                params = int_interval_params(ests_int[0], ip, cfg.bit_width)
            else:
                params = ChannelQuantParams(
                    tuple(int_interval_params(e, ip, cfg.bit_width) for e in ests_int),
                    axis=0,
                )
        else:
            ests_real = estimate_layer_output(
                cfg, layer, dequantize_tensor(x_q), cal.weight_stats,
                gamma=cal.gamma, counter=counter,
            )
            ests_list = _as_est_list(ests_real)
            params = params_from_interval(ests_real, ip, cfg.bit_width)
        cov = _coverage_fraction(y_wid, ests_list, ip)
        timing = BEFORE_EVAL
    else:
        params, timing = output_params(
            cfg, record, idx, layer, x_q, widened=Tensor.from_array(y_wid)
        )
    peak = 1 if timing == BEFORE_EVAL else int(y_wid.size)

    if int_kernels:
        cols = acc if layer.kind == CONV2D else acc[None, :]
        q_cols = requantize_columns(cols, x_q.params.scale, w_q, params, cfg.bit_width)
        payload = q_cols.T.reshape(-1) if layer.kind == CONV2D else q_cols[0]
        y_q = QuantizedTensor(out_shape, payload, params)
    else:
        y_q = quantize_with(y_wid, params)
    return y_q, cov, peak


def forward_quantized(
    model: ModelGraph,
    x: Tensor,
    cfg: SchemeKind,
    record: CalibrationRecord | None = None,
    weight_q: dict[int, QuantizedTensor] | None = None,
    int_kernels: bool = False,
) -> ForwardResult:
    """Run one sample through the quantized model and collect metrics."""
    if cfg.scheme in (STATIC, PROBABILISTIC) and record is None:
        raise ValueError(f"the {cfg.scheme} scheme needs a calibration record")
    if int_kernels and cfg.scheme == PROBABILISTIC and cfg.aggregation != TOTAL_VARIANCE:
        raise ValueError("integer kernels implement the total-variance aggregation only")
    wq = weight_q if weight_q is not None else quantize_weights(model, cfg)
    _, float_outs = forward_float(model, x)
    x_q = quantize_input(x, cfg.bit_width)
    counter = MacCounter()
    mses: dict[int, float] = {}
    covs: dict[int, float] = {}
    peaks: dict[int, int] = {}
    for idx, layer in enumerate(model.layers):
        if layer.kind in QUANTIZING_KINDS:
            x_q, cov, peak = _run_kernel_layer(
                cfg, record, idx, layer, x_q, wq[idx], counter, int_kernels
            )
            if cov is not None:
                covs[idx] = cov
            peaks[idx] = peak
            err = dequantize_tensor(x_q).array() - float_outs[idx].array()
            mses[idx] = float(np.mean(err * err))
        else:
            x_q = _payload_passthrough(layer, x_q)
    logits = dequantize_tensor(x_q).array().reshape(-1)
    return ForwardResult(logits, int(np.argmax(logits)), mses, covs, peaks, counter.macs)


def _merge(results: list[ForwardResult], labels: np.ndarray, scheme: str) -> EvalResult:
    n = len(results)
    preds = tuple(r.prediction for r in results)
    acc = float(np.mean([p == int(t) for p, t in zip(preds, labels)]))
    layer_mse: dict[int, float] = {}
    layer_peak: dict[int, int] = {}
    for r in results:
        for idx, v in r.layer_mse.items():
            layer_mse[idx] = layer_mse.get(idx, 0.0) + v
        for idx, v in r.layer_peak.items():
            layer_peak[idx] = max(layer_peak.get(idx, 0), v)
    layer_mse = {idx: v / n for idx, v in sorted(layer_mse.items())}
    cov_means = [
        float(np.mean(list(r.layer_coverage.values()))) for r in results if r.layer_coverage
    ]
    mean_cov = float(np.mean(cov_means)) if cov_means else None
    peak = max(layer_peak.values(), default=0)
    macs = sum(r.estimator_macs for r in results)
    return EvalResult(
        scheme, n, acc, layer_mse, dict(sorted(layer_peak.items())),
        mean_cov, peak, macs, preds,
    )


def evaluate(
    model: ModelGraph,
    data: Dataset,
    cfg: SchemeKind | None,
    record: CalibrationRecord | None = None,
    int_kernels: bool = False,
) -> EvalResult:
    """Evaluate the model over a dataset; cfg=None runs the float64 baseline.

    Samples are independent, so they may run on a thread pool
    (QUANTLAB_THREADS caps it); results merge in sample order, which keeps
    every reported number independent of the worker count.
    """
    labels = np.array([int(t) for t in data.labels])
    if cfg is None:
        preds = []
        for x in data.samples:
            y, _ = forward_float(model, x)
            preds.append(int(np.argmax(y.array().reshape(-1))))
        acc = float(np.mean([p == int(t) for p, t in zip(preds, labels)]))
        return EvalResult("float", len(data), acc, {}, {}, None, 0, 0, tuple(preds))
    if cfg.scheme in (STATIC, PROBABILISTIC):
        if record is None:
            raise ValueError(f"the {cfg.scheme} scheme needs a calibration record")
        check_record(record, model, cfg)
    wq = quantize_weights(model, cfg)

    def run(i: int) -> ForwardResult:
        return forward_quantized(model, data.samples[i], cfg, record, wq, int_kernels)

    workers = thread_count()
    if workers > 1 and len(data) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, range(len(data))))
    else:
        results = [run(i) for i in range(len(data))]
    return _merge(results, labels, cfg.scheme)
