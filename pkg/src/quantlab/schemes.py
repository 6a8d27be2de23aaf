"""The three activation-quantization strategies behind one interface.

* static — output ranges observed once on calibration data; parameters are
  fixed before evaluation and never look at live activations.
* dynamic — parameters derived from the exact min/max of each widened layer
  output, so the whole output must exist at cast precision first.
* probabilistic — parameters predicted before evaluation from the layer's
  weight statistics and the live input's window sums, via a calibrated
  interval [mean - alpha*sigma, mean + beta*sigma].

A calibration produces a record keyed by layer index and guarded by the model
hash; records serialize to a JSON document whose reals carry at least 17
significant digits so reloading is lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import moments
from .moments import (
    ConvEstimates,
    IntervalParams,
    MomentEstimate,
    WeightStats,
    aggregate,
    calibrate_alpha_beta,
    estimate_conv,
    estimate_linear,
    fit_weight_stats,
    interval,
)
from .nn import CONV2D, LINEAR, QUANTIZING_KINDS, Dataset, Layer, ModelGraph, forward_float
from .quant import ChannelQuantParams, QuantParams, QuantizedTensor, dequantize_tensor, qparams_zero_anchored
from .tensor import Tensor

STATIC = "static"
DYNAMIC = "dynamic"
PROBABILISTIC = "probabilistic"
SCHEMES = (STATIC, DYNAMIC, PROBABILISTIC)

BEFORE_EVAL = "before_eval"
AFTER_EVAL = "after_eval"


@dataclass(frozen=True)
class SchemeKind:
    """Scheme selection plus the knobs every run needs."""

    scheme: str
    granularity: str = "tensor"
    bit_width: int = 8
    cast_width: int = 32
    gamma: float = 1.0
    coverage_target: float = 0.999
    aggregation: str = moments.TOTAL_VARIANCE

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in ("tensor", "channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not 2 <= self.bit_width <= 16:
            raise ValueError("bit-width must be in [2, 16]")
        if self.cast_width <= self.bit_width:
            raise ValueError("cast width must exceed the storage bit-width")
        if not 0 < self.coverage_target <= 1:
            raise ValueError("coverage target must be in (0, 1]")
        moments.StrideConfig(self.gamma)  # validates gamma


def effective_granularity(cfg: SchemeKind, layer: Layer) -> str:
    """Per-channel applies to conv outputs; 1-D linear outputs stay per-tensor."""
    return "channel" if (cfg.granularity == "channel" and layer.kind == CONV2D) else "tensor"


@dataclass(frozen=True)
class LayerCalibration:
    """Everything one layer contributes to a calibration record."""

    layer_index: int
    granularity: str
    range_min: float | tuple[float, ...] | None = None
    range_max: float | tuple[float, ...] | None = None
    qparams: QuantParams | ChannelQuantParams | None = None
    weight_stats: WeightStats | None = None
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None

    def interval_params(self) -> IntervalParams:
        if self.alpha is None or self.beta is None:
            raise ValueError("layer has no calibrated interval")
        return IntervalParams(self.alpha, self.beta)


@dataclass(frozen=True)
class CalibrationRecord:
    model_hash: str
    config: SchemeKind
    calib_id: str
    num_samples: int
    layers: dict[int, LayerCalibration] = field(default_factory=dict)

    def layer(self, idx: int) -> LayerCalibration:
        if idx not in self.layers:
            raise KeyError(f"no calibration for layer {idx}")
        return self.layers[idx]


def check_record(record: CalibrationRecord, model: ModelGraph, cfg: SchemeKind) -> None:
    """Refuse records from another model or an incompatible configuration."""
    if record.model_hash != model.model_hash:
        raise ValueError("calibration record was made for a different model")
    if record.config != cfg:
        raise ValueError(
            f"calibration config {record.config} does not match requested {cfg}"
        )


def _samples(data: Dataset | Sequence[Tensor]) -> list[Tensor]:
    return list(data.samples) if isinstance(data, Dataset) else list(data)


def _stats_mode(cfg: SchemeKind, layer: Layer) -> str:
    return "channel" if effective_granularity(cfg, layer) == "channel" else "tensor"


def estimate_layer_output(
    cfg: SchemeKind,
    layer: Layer,
    x: Tensor,
    ws: WeightStats,
    gamma: float | None = None,
    counter: moments.MacCounter | None = None,
) -> MomentEstimate | list[MomentEstimate]:
    """Pooled output moments of one conv/linear layer for a live input.

    The layer bias shifts the modeled means (per channel where the stats have
    channels); with tensor-mode stats the bias spread still reaches the pooled
    variance through the aggregation's dispersion term.
    """
    g = cfg.gamma if gamma is None else gamma
    bias = layer.bias.array() if layer.bias is not None else None
    if layer.kind == CONV2D:
        _, _, kh, kw = layer.weights.shape
        ce = estimate_conv(
            x, ws, (kh, kw), layer.stride, layer.padding, gamma=g, counter=counter
        )
        return aggregate(
            ce.with_bias(bias), effective_granularity(cfg, layer), cfg.aggregation
        )
    if layer.kind != LINEAR:
        raise ValueError(f"{layer.kind} layers have no output estimate")
    est = estimate_linear(x, ws, counter=counter)
    if bias is None:
        return est
    shifted = ConvEstimates(
        ((0, 0),),
        est.mean + bias.reshape(1, -1),
        np.full((1, bias.size), est.var),
    )
    return aggregate(shifted, "tensor", cfg.aggregation)


def params_from_interval(
    ests: MomentEstimate | list[MomentEstimate], ip: IntervalParams, bit_width: int
) -> QuantParams | ChannelQuantParams:
    """Zero-anchored quantization parameters from predicted interval(s)."""
    if isinstance(ests, MomentEstimate):
        lo, hi = interval(ests, ip)
        return qparams_zero_anchored(lo, hi, bit_width)
    per = []
    for e in ests:
        lo, hi = interval(e, ip)
        per.append(qparams_zero_anchored(lo, hi, bit_width))
    return ChannelQuantParams(tuple(per), axis=0)


def calibrate_static(
    model: ModelGraph,
    data: Dataset | Sequence[Tensor],
    cfg: SchemeKind,
    calib_id: str = "",
) -> CalibrationRecord:
    """Record per-layer output extrema over calibration passes."""
    if cfg.scheme != STATIC:
        raise ValueError("calibrate_static needs a static config")
    samples = _samples(data)
    if not samples:
        raise ValueError("calibration needs at least one sample")
    lo: dict[int, np.ndarray] = {}
    hi: dict[int, np.ndarray] = {}
    for x in samples:
        _, outs = forward_float(model, x)
        for idx, layer in enumerate(model.layers):
            if layer.kind not in QUANTIZING_KINDS:
                continue
            a = outs[idx].array()
            if effective_granularity(cfg, layer) == "channel":
                mn = a.reshape(a.shape[0], -1).min(axis=1)
                mx = a.reshape(a.shape[0], -1).max(axis=1)
            else:
                mn = np.array([a.min()])
                mx = np.array([a.max()])
            lo[idx] = mn if idx not in lo else np.minimum(lo[idx], mn)
            hi[idx] = mx if idx not in hi else np.maximum(hi[idx], mx)
    layers = {}
    for idx, layer in enumerate(model.layers):
        if idx not in lo:
            continue
        gran = effective_granularity(cfg, layer)
        if gran == "channel":
            qp = ChannelQuantParams(
                tuple(
                    qparams_zero_anchored(float(m), float(M), cfg.bit_width)
                    for m, M in zip(lo[idx], hi[idx])
                ),
                axis=0,
            )
            rmin, rmax = tuple(map(float, lo[idx])), tuple(map(float, hi[idx]))
        else:
            qp = qparams_zero_anchored(float(lo[idx][0]), float(hi[idx][0]), cfg.bit_width)
            rmin, rmax = float(lo[idx][0]), float(hi[idx][0])
        layers[idx] = LayerCalibration(idx, gran, range_min=rmin, range_max=rmax, qparams=qp)
    return CalibrationRecord(model.model_hash, cfg, calib_id, len(samples), layers)


def calibrate_probabilistic(
    model: ModelGraph,
    data: Dataset | Sequence[Tensor],
    cfg: SchemeKind,
    target: float | None = None,
    calib_id: str = "",
) -> CalibrationRecord:
    """Fit weight statistics and per-layer (alpha, beta) on calibration passes.

    ``target`` overrides the coverage target baked into ``cfg``.
    """
    if cfg.scheme != PROBABILISTIC:
        raise ValueError("calibrate_probabilistic needs a probabilistic config")
    if target is not None:
        cfg = replace(cfg, coverage_target=target)
    samples = _samples(data)
    if not samples:
        raise ValueError("calibration needs at least one sample")
    stats = {
        idx: fit_weight_stats(layer.weights, _stats_mode(cfg, layer))
        for idx, layer in enumerate(model.layers)
        if layer.kind in QUANTIZING_KINDS
    }
    preacts: dict[int, list[Tensor]] = {idx: [] for idx in stats}
    ests: dict[int, list] = {idx: [] for idx in stats}
    for x in samples:
        _, outs = forward_float(model, x)
        inputs = [x] + outs[:-1]
        for idx in stats:
            layer = model.layers[idx]
            preacts[idx].append(outs[idx])
            ests[idx].append(estimate_layer_output(cfg, layer, inputs[idx], stats[idx]))
    layers = {}
    for idx, layer_stats in stats.items():
        layer = model.layers[idx]
        ip = calibrate_alpha_beta(preacts[idx], ests[idx], cfg.coverage_target)
        layers[idx] = LayerCalibration(
            idx,
            effective_granularity(cfg, layer),
            weight_stats=layer_stats,
            alpha=ip.alpha,
            beta=ip.beta,
            gamma=cfg.gamma if layer.kind == CONV2D else None,
        )
    return CalibrationRecord(model.model_hash, cfg, calib_id, len(samples), layers)


def output_params(
    cfg: SchemeKind,
    record: CalibrationRecord | None,
    layer_index: int,
    layer: Layer,
    x_q: QuantizedTensor,
    widened: Tensor | None = None,
) -> tuple[QuantParams | ChannelQuantParams, str]:
    """Output quantization parameters for one layer, plus when they are known.

    Returns (params, timing): "before_eval" means the pipeline can compress
    each output entry as it is produced; "after_eval" (dynamic only) means the
    widened output had to be inspected first.
    """
    if cfg.scheme == STATIC:
        if record is None:
            raise ValueError("static scheme needs a calibration record")
        return record.layer(layer_index).qparams, BEFORE_EVAL
    if cfg.scheme == DYNAMIC:
        if widened is None:
            raise ValueError("dynamic scheme derives params from the widened output")
        a = widened.array()
        if effective_granularity(cfg, layer) == "channel":
            flat = a.reshape(a.shape[0], -1)
            per = tuple(
                qparams_zero_anchored(float(r.min()), float(r.max()), cfg.bit_width)
                for r in flat
            )
            return ChannelQuantParams(per, axis=0), AFTER_EVAL
        return (
            qparams_zero_anchored(float(a.min()), float(a.max()), cfg.bit_width),
            AFTER_EVAL,
        )
    if record is None:
        raise ValueError("probabilistic scheme needs a calibration record")
    cal = record.layer(layer_index)
    x_hat = dequantize_tensor(x_q)
    ests = estimate_layer_output(
        cfg, layer, x_hat, cal.weight_stats, gamma=cal.gamma
    )
    return params_from_interval(ests, cal.interval_params(), cfg.bit_width), BEFORE_EVAL


# ---------------------------------------------------------------------------
# Calibration file format: JSON with reals at >= 17 significant digits.


def _fmt(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_fmt(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _params_doc(qp: QuantParams | ChannelQuantParams | None) -> tuple:
    if qp is None:
        return None, None
    if isinstance(qp, QuantParams):
        return qp.scale, qp.zero_point
    return [p.scale for p in qp.per_channel], [p.zero_point for p in qp.per_channel]


def record_to_doc(record: CalibrationRecord) -> dict:
    cfg = record.config
    per_layer = []
    for idx in sorted(record.layers):
        cal = record.layers[idx]
        s, z = _params_doc(cal.qparams)
        ws = None
        if cal.weight_stats is not None:
            ws = {
                "mode": cal.weight_stats.mode,
                "mean": list(map(float, cal.weight_stats.mean)),
                "var": list(map(float, cal.weight_stats.var)),
            }
        per_layer.append(
            {
                "layer_index": idx,
                "granularity": cal.granularity,
                "m": cal.range_min,
                "M": cal.range_max,
                "s": s,
                "z": z,
                "weight_stats": ws,
                "alpha": cal.alpha,
                "beta": cal.beta,
                "gamma": cal.gamma,
            }
        )
    return {
        "model_hash": record.model_hash,
        "scheme": cfg.scheme,
        "granularity": cfg.granularity,
        "bit_width": cfg.bit_width,
        "cast_width": cfg.cast_width,
        "coverage_target": cfg.coverage_target,
        "aggregation": cfg.aggregation,
        "gamma": cfg.gamma,
        "calib_id": record.calib_id,
        "num_samples": record.num_samples,
        "per_layer": per_layer,
    }


def save_calibration(record: CalibrationRecord, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_fmt(record_to_doc(record)))
        f.write("\n")


def _params_from_doc(s, z, bit_width: int):
    if s is None:
        return None
    if isinstance(s, list):
        per = tuple(QuantParams(float(sv), int(zv), bit_width) for sv, zv in zip(s, z))
        return ChannelQuantParams(per, axis=0)
    return QuantParams(float(s), int(z), bit_width)


def load_calibration(path: str) -> CalibrationRecord:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    cfg = SchemeKind(
        scheme=doc["scheme"],
        granularity=doc["granularity"],
        bit_width=int(doc["bit_width"]),
        cast_width=int(doc["cast_width"]),
        gamma=float(doc["gamma"]),
        coverage_target=float(doc["coverage_target"]),
        aggregation=doc["aggregation"],
    )
    layers = {}
    for entry in doc["per_layer"]:
        idx = int(entry["layer_index"])
        ws = None
        if entry.get("weight_stats") is not None:
            w = entry["weight_stats"]
            ws = WeightStats(w["mode"], np.array(w["mean"]), np.array(w["var"]))
        rmin = entry.get("m")
        rmax = entry.get("M")
        layers[idx] = LayerCalibration(
            idx,
            entry["granularity"],
            range_min=tuple(rmin) if isinstance(rmin, list) else rmin,
            range_max=tuple(rmax) if isinstance(rmax, list) else rmax,
            qparams=_params_from_doc(entry.get("s"), entry.get("z"), cfg.bit_width),
            weight_stats=ws,
            alpha=entry.get("alpha"),
            beta=entry.get("beta"),
            gamma=entry.get("gamma"),
        )
    return CalibrationRecord(
        doc["model_hash"], cfg, doc.get("calib_id", ""), int(doc["num_samples"]), layers
    )
