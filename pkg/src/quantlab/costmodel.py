"""Closed-form memory and operation accounting per layer and scheme.

With h output entries at storage width b and cast width b', per layer:

* memory overhead beyond the b-bit payload — static: 3b' (scale, zero-point,
  spare); dynamic: b'h + 3b' (the whole widened output is live until its
  extrema are known); probabilistic: 5b' (mean, variance, interval pair,
  derived scale);
* peak simultaneously-live widened entries — 1 when parameters are known
  before evaluation, h for dynamic;
* range-estimator multiply-accumulates (probabilistic only) — 2 per visited
  input tap, over lattice-sampled conv output positions, independent of the
  output channel count because window sums are shared across channels;
* kernel multiply-accumulates and, for dynamic, the h extrema comparisons.

The estimator figures use the same lattice the live estimator walks, so a
measured MAC counter must match this model exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Sequence

from .moments import lattice_positions
from .nn import CONV2D, LINEAR, QUANTIZING_KINDS, ModelGraph
from .schemes import DYNAMIC, PROBABILISTIC, STATIC, SchemeKind

CSV_COLUMNS = (
    "layer",
    "scheme",
    "mem_overhead_bits",
    "estimator_macs",
    "kernel_macs",
    "extrema_cmps",
)


def memory_overhead(scheme: str, out_entries: int, cast_width: int) -> int:
    """Bits a scheme keeps alive beyond the quantized payload of one layer."""
    if scheme == STATIC:
        return 3 * cast_width
    if scheme == DYNAMIC:
        return cast_width * out_entries + 3 * cast_width
    if scheme == PROBABILISTIC:
        return 5 * cast_width
    raise ValueError(f"unknown scheme {scheme!r}")


def peak_widened_entries(scheme: str, out_entries: int) -> int:
    """Widened accumulator entries simultaneously live in one layer."""
    return out_entries if scheme == DYNAMIC else 1


def estimator_ops(
    scheme: str,
    kind: str,
    in_shape: tuple[int, ...],
    out_shape: tuple[int, ...],
    kernel: tuple[int, int] | None,
    gamma: float,
) -> int:
    """Multiply-accumulates of the range estimator for one layer pass."""
    if scheme != PROBABILISTIC:
        return 0
    if kind == LINEAR:
        return 2 * in_shape[0]
    oh, ow = out_shape[1], out_shape[2]
    g = min(gamma, float(max(1, max(oh, ow) - 1)))  # same clamp the live estimator applies
    n_lat = lattice_positions(oh, g).size * lattice_positions(ow, g).size
    return n_lat * in_shape[0] * kernel[0] * kernel[1] * 2


def kernel_ops(kind: str, in_shape: tuple[int, ...], out_shape: tuple[int, ...],
                kernel: tuple[int, int] | None) -> int:
    """Multiply-accumulates of the layer itself."""
    if kind == LINEAR:
        return out_shape[0] * in_shape[0]
    l, oh, ow = out_shape
    return oh * ow * l * in_shape[0] * kernel[0] * kernel[1]


def extrema_comparisons(scheme: str, out_entries: int) -> int:
    """Min/max scan cost dynamic pays per layer; other schemes pay none."""
    return out_entries if scheme == DYNAMIC else 0


@dataclass(frozen=True)
class LayerCost:
    layer_index: int
    kind: str
    scheme: str
    out_entries: int
    mem_overhead_bits: int
    estimator_ops: int
    kernel_ops: int
    extrema_cmps: int
    peak_widened: int


def model_cost(model: ModelGraph, cfg: SchemeKind) -> list[LayerCost]:
    """Per-layer cost rows for every conv/linear layer of a model."""
    shapes = model.layer_output_shapes()
    costs = []
    for idx, layer in enumerate(model.layers):
        if layer.kind not in QUANTIZING_KINDS:
            continue
        in_shape = model.input_shape if idx == 0 else shapes[idx - 1]
        out_shape = shapes[idx]
        h = 1
        for d in out_shape:
            h *= d
        kernel = layer.weights.shape[2:] if layer.kind == CONV2D else None
        costs.append(
            LayerCost(
                layer_index=idx,
                kind=layer.kind,
                scheme=cfg.scheme,
                out_entries=h,
                mem_overhead_bits=memory_overhead(cfg.scheme, h, cfg.cast_width),
                estimator_ops=estimator_ops(
                    cfg.scheme, layer.kind, in_shape, out_shape, kernel, cfg.gamma
                ),
                kernel_ops=kernel_ops(layer.kind, in_shape, out_shape, kernel),
                extrema_cmps=extrema_comparisons(cfg.scheme, h),
                peak_widened=peak_widened_entries(cfg.scheme, h),
            )
        )
    return costs


def write_cost_csv(costs: Sequence[LayerCost], out: IO[str]) -> None:
    w = csv.writer(out)
    w.writerow(CSV_COLUMNS)
    for c in costs:
        w.writerow(
            [c.layer_index, c.scheme, c.mem_overhead_bits,
             c.estimator_ops, c.kernel_ops, c.extrema_cmps]
        )
