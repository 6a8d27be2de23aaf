"""Quantized CNN inference with static, dynamic and moment-predicted ranges."""

from .corruptions import CORRUPTION_KINDS, Corruption, apply_corruption, corrupt_dataset, make_corruption
from .costmodel import LayerCost, estimator_ops, memory_overhead, model_cost, peak_widened_entries
from .moments import (
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
from .nn import (
    Dataset,
    Layer,
    ModelGraph,
    conv2d,
    flatten,
    forward_float,
    linear,
    load_dataset,
    load_model,
    maxpool,
    relu,
    save_dataset,
    save_model,
)
from .pipeline import EvalResult, ForwardResult, evaluate, forward_quantized, quantize_weights
from .quant import (
    ChannelQuantParams,
    QuantParams,
    QuantizedTensor,
    dequantize_tensor,
    qparams_from_range,
    qparams_zero_anchored,
    quantize_tensor,
)
from .schemes import (
    CalibrationRecord,
    SchemeKind,
    calibrate_probabilistic,
    calibrate_static,
    load_calibration,
    output_params,
    save_calibration,
)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CORRUPTION_KINDS",
    "CalibrationRecord",
    "ChannelQuantParams",
    "Corruption",
    "Dataset",
    "EvalResult",
    "ForwardResult",
    "IntervalParams",
    "Layer",
    "LayerCost",
    "ModelGraph",
    "MomentEstimate",
    "QuantParams",
    "QuantizedTensor",
    "SchemeKind",
    "Tensor",
    "WeightStats",
    "aggregate",
    "apply_corruption",
    "calibrate_alpha_beta",
    "calibrate_probabilistic",
    "calibrate_static",
    "conv2d",
    "corrupt_dataset",
    "dequantize_tensor",
    "estimate_conv",
    "estimate_linear",
    "evaluate",
    "fit_weight_stats",
    "flatten",
    "forward_float",
    "forward_quantized",
    "interval",
    "linear",
    "load_calibration",
    "load_dataset",
    "load_model",
    "make_corruption",
    "maxpool",
    "estimator_ops",
    "memory_overhead",
    "model_cost",
    "output_params",
    "peak_widened_entries",
    "qparams_from_range",
    "qparams_zero_anchored",
    "quantize_tensor",
    "quantize_weights",
    "relu",
    "save_calibration",
    "save_dataset",
    "save_model",
    "__version__",
]
