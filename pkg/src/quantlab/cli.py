"""Command-line front end.

Subcommands:

* make-demo  — write the demo model and datasets to a directory
* calibrate  — fit a static or probabilistic calibration record
* eval       — evaluate one scheme (or the float baseline) on a dataset
* compare    — all schemes side by side in one table
* sweep      — estimator stride and calibration-set-size sweeps
* corrupt    — materialize a corrupted copy of a dataset
* cost       — per-layer memory/op cost table for a scheme

Reports are pure functions of the inputs and the --seed, so identical
invocations produce byte-identical output; QUANTLAB_THREADS only changes how
many workers evaluation uses, never the numbers.
"""

from __future__ import annotations

import argparse
import io
import json
import sys

import numpy as np

from . import costmodel
from .corruptions import (
    CORRUPTION_KINDS,
    corrupt_dataset,
    corrupt_dataset_uniform,
    make_corruption,
)
from .nn import Dataset, ModelGraph, load_dataset, load_model, save_dataset
from .pipeline import EvalResult, evaluate
from .schemes import (
    DYNAMIC,
    PROBABILISTIC,
    STATIC,
    SchemeKind,
    calibrate_probabilistic,
    calibrate_static,
    load_calibration,
    save_calibration,
)
from . import demo

_SCHEME_ALIASES = {
    "static": STATIC,
    "dynamic": DYNAMIC,
    "prob": PROBABILISTIC,
    "probabilistic": PROBABILISTIC,
    "float": "float",
}

COMPARE_COLUMNS = ("FP32", "Ours-T", "Ours-C", "Dyn-T", "Dyn-C", "Stat-T", "Stat-C")


def _canon_scheme(name: str) -> str:
    try:
        return _SCHEME_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}") from None


def _add_scheme_flags(p: argparse.ArgumentParser, with_scheme: bool = True) -> None:
    if with_scheme:
        p.add_argument("--scheme", required=True, choices=sorted(_SCHEME_ALIASES))
    p.add_argument("--granularity", default="tensor", choices=("tensor", "channel"))
    p.add_argument("--bits", type=int, default=8, help="storage bit-width")
    p.add_argument("--cast-bits", type=int, default=32, help="accumulator bit-width")
    p.add_argument("--gamma", type=float, default=1.0, help="estimator lattice stride")
    p.add_argument("--coverage", type=float, default=0.999, help="interval coverage target")


def _cfg_from_args(args, scheme: str) -> SchemeKind:
    return SchemeKind(
        scheme=scheme,
        granularity=args.granularity,
        bit_width=args.bits,
        cast_width=args.cast_bits,
        gamma=args.gamma,
        coverage_target=args.coverage,
    )


def _subset(ds: Dataset, n: int | None, seed: int) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    rng = np.random.default_rng([seed, 0x5EED])
    idx = rng.permutation(len(ds))[:n]
    return ds.subset([int(i) for i in idx])


def _parse_corrupt(spec: str, seed: int):
    kind, sep, sev = spec.partition(":")
    if not sep:
        raise ValueError(
            "--corrupt wants KIND:SEVERITY (e.g. brightness:3), "
            "or no value for the per-image uniform protocol"
        )
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption {kind!r} (pick from {', '.join(CORRUPTION_KINDS)})")
    return make_corruption(kind, int(sev), seed)


def _load_eval_data(args) -> Dataset:
    ds = _subset(load_dataset(args.data), args.samples, args.seed)
    spec = getattr(args, "corrupt", None)
    if spec == "uniform":
        ds = corrupt_dataset_uniform(ds, args.seed)
    elif spec:
        ds = corrupt_dataset(ds, _parse_corrupt(spec, args.seed))
    return ds


def _fmt_cov(c: float | None) -> str:
    return "" if c is None else f"{c:.4f}"


def cmd_make_demo(args) -> int:
    paths = demo.make_demo(args.out, args.seed, args.calib_size, args.test_size)
    for name in ("model", "calib", "test"):
        print(f"{name}: {paths[name]}")
    return 0


def cmd_calibrate(args) -> int:
    scheme = _canon_scheme(args.scheme)
    if scheme not in (STATIC, PROBABILISTIC):
        raise ValueError("only the static and probabilistic schemes are calibrated")
    model = load_model(args.model)
    data = _subset(load_dataset(args.data), args.samples, args.seed)
    cfg = _cfg_from_args(args, scheme)
    calib_id = f"{args.data}#{len(data)}"
    fit = calibrate_static if scheme == STATIC else calibrate_probabilistic
    record = fit(model, data, cfg, calib_id=calib_id)
    save_calibration(record, args.out)
    print(f"calibrated {scheme}/{cfg.granularity} on {len(data)} samples -> {args.out}")
    return 0


def _overhead_bits(model: ModelGraph, cfg: SchemeKind) -> int:
    return sum(c.mem_overhead_bits for c in costmodel.model_cost(model, cfg))


def _eval_doc(model: ModelGraph, cfg: SchemeKind | None, res: EvalResult, args) -> dict:
    doc = {
        "scheme": res.scheme,
        "num_samples": res.num_samples,
        "accuracy": res.accuracy,
        "seed": args.seed,
        "model_hash": model.model_hash,
    }
    if cfg is not None:
        doc.update(
            {
                "granularity": cfg.granularity,
                "bits": cfg.bit_width,
                "cast_bits": cfg.cast_width,
                "gamma": cfg.gamma,
                "coverage_target": cfg.coverage_target,
                "int_kernels": bool(getattr(args, "int_kernels", False)),
                "layer_mse": {str(k): v for k, v in res.layer_mse.items()},
                "mean_mse": res.mean_mse,
                "mean_coverage": res.mean_coverage,
                "peak_widened": res.peak_widened,
                "estimator_macs": res.estimator_macs,
                "mem_overhead_bits": _overhead_bits(model, cfg),
            }
        )
    if getattr(args, "corrupt", None):
        doc["corrupt"] = args.corrupt
    return doc


def cmd_eval(args) -> int:
    scheme = _canon_scheme(args.scheme)
    model = load_model(args.model)
    data = _load_eval_data(args)
    if scheme == "float":
        cfg, record = None, None
    else:
        cfg = _cfg_from_args(args, scheme)
        record = None
        if scheme in (STATIC, PROBABILISTIC):
            if not args.calib:
                raise ValueError(f"the {scheme} scheme needs --calib")
            record = load_calibration(args.calib)
    res = evaluate(model, data, cfg, record, int_kernels=args.int_kernels)
    doc = _eval_doc(model, cfg, res, args)
    text = json.dumps(doc, sort_keys=True, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def _compare_results(model, calib, data, args) -> dict[str, EvalResult]:
    out: dict[str, EvalResult] = {"FP32": evaluate(model, data, None)}
    plans = {
        "Ours-T": (PROBABILISTIC, "tensor"),
        "Ours-C": (PROBABILISTIC, "channel"),
        "Dyn-T": (DYNAMIC, "tensor"),
        "Dyn-C": (DYNAMIC, "channel"),
        "Stat-T": (STATIC, "tensor"),
        "Stat-C": (STATIC, "channel"),
    }
    for col, (scheme, gran) in plans.items():
        cfg = SchemeKind(
            scheme=scheme,
            granularity=gran,
            bit_width=args.bits,
            cast_width=args.cast_bits,
            gamma=args.gamma,
            coverage_target=args.coverage,
        )
        record = None
        if scheme == STATIC:
            record = calibrate_static(model, calib, cfg, calib_id="compare")
        elif scheme == PROBABILISTIC:
            record = calibrate_probabilistic(model, calib, cfg, calib_id="compare")
        out[col] = evaluate(model, data, cfg, record, int_kernels=args.int_kernels)
    return out


def _compare_rows(model, results: dict[str, EvalResult], args) -> list[list[str]]:
    def cfg_for(col):
        scheme = {"Ours": PROBABILISTIC, "Dyn": DYNAMIC, "Stat": STATIC}[col.split("-")[0]]
        gran = "tensor" if col.endswith("-T") else "channel"
        return SchemeKind(scheme=scheme, granularity=gran, bit_width=args.bits,
                          cast_width=args.cast_bits, gamma=args.gamma,
                          coverage_target=args.coverage)

    rows = [["metric", *COMPARE_COLUMNS]]
    by = {c: results[c] for c in COMPARE_COLUMNS}
    rows.append(["top1_acc", *(f"{by[c].accuracy:.4f}" for c in COMPARE_COLUMNS)])
    rows.append(
        ["mean_mse"]
        + ["" if c == "FP32" else f"{by[c].mean_mse:.6e}" for c in COMPARE_COLUMNS]
    )
    rows.append(["mean_coverage", *(_fmt_cov(by[c].mean_coverage) for c in COMPARE_COLUMNS)])
    rows.append(
        ["peak_widened"]
        + ["" if c == "FP32" else str(by[c].peak_widened) for c in COMPARE_COLUMNS]
    )
    rows.append(
        ["estimator_macs_per_sample"]
        + [
            "" if c == "FP32" else str(by[c].estimator_macs // max(by[c].num_samples, 1))
            for c in COMPARE_COLUMNS
        ]
    )
    rows.append(
        ["mem_overhead_bits"]
        + ["" if c == "FP32" else str(_overhead_bits(model, cfg_for(c))) for c in COMPARE_COLUMNS]
    )
    return rows


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())


def _write_csv_rows(rows: list[list[str]], path: str) -> None:
    buf = io.StringIO()
    for r in rows:
        buf.write(",".join(r) + "\n")
    with open(path, "w", encoding="utf-8") as f:
        f.write(buf.getvalue())


def cmd_compare(args) -> int:
    model = load_model(args.model)
    calib = _subset(load_dataset(args.calib_data), args.calib_samples, args.seed)
    data = _load_eval_data(args)
    results = _compare_results(model, calib, data, args)
    rows = _compare_rows(model, results, args)
    _print_table(rows)
    if args.out:
        _write_csv_rows(rows, args.out)
    return 0


GAMMA_SWEEP = (1.0, 4.0, 8.0, 16.0, 32.0)
SIZE_SWEEP = (16, 32, 64, 128, 256, 512)
SIZE_REPEATS = 3


def cmd_sweep(args) -> int:
    model = load_model(args.model)
    calib = load_dataset(args.calib_data)
    data = _load_eval_data(args)
    rows = [["sweep", "param", "repeat", "accuracy", "mean_coverage", "estimator_macs_per_sample"]]
    for g in GAMMA_SWEEP:
        cfg = SchemeKind(
            scheme=PROBABILISTIC, granularity=args.granularity, bit_width=args.bits,
            cast_width=args.cast_bits, gamma=g, coverage_target=args.coverage,
        )
        record = calibrate_probabilistic(model, calib, cfg, calib_id=f"gamma={g}")
        res = evaluate(model, data, cfg, record)
        rows.append(
            ["gamma", f"{g:g}", "0", f"{res.accuracy:.4f}", _fmt_cov(res.mean_coverage),
             str(res.estimator_macs // max(res.num_samples, 1))]
        )
    cfg = SchemeKind(
        scheme=PROBABILISTIC, granularity=args.granularity, bit_width=args.bits,
        cast_width=args.cast_bits, gamma=args.gamma, coverage_target=args.coverage,
    )
    for size in SIZE_SWEEP:
        for rep in range(SIZE_REPEATS):
            rng = np.random.default_rng([args.seed, size, rep])
            idx = rng.permutation(len(calib))[: min(size, len(calib))]
            sub = calib.subset([int(i) for i in idx])
            record = calibrate_probabilistic(model, sub, cfg, calib_id=f"n={size} r={rep}")
            res = evaluate(model, data, cfg, record)
            rows.append(
                ["calib_size", str(size), str(rep), f"{res.accuracy:.4f}",
                 _fmt_cov(res.mean_coverage), str(res.estimator_macs // max(res.num_samples, 1))]
            )
    _print_table(rows)
    if args.out:
        _write_csv_rows(rows, args.out)
    return 0


def cmd_corrupt(args) -> int:
    ds = load_dataset(args.data)
    corr = make_corruption(args.kind, args.severity, args.seed)
    save_dataset(corrupt_dataset(ds, corr), args.out)
    print(f"wrote {len(ds)} corrupted samples ({args.kind}:{args.severity}) -> {args.out}")
    return 0


def cmd_cost(args) -> int:
    scheme = _canon_scheme(args.scheme)
    if scheme == "float":
        raise ValueError("the cost table covers the quantized schemes")
    model = load_model(args.model)
    cfg = _cfg_from_args(args, scheme)
    costs = costmodel.model_cost(model, cfg)
    buf = io.StringIO()
    costmodel.write_cost_csv(costs, buf)
    sys.stdout.write(buf.getvalue())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantlab",
        description="Quantized inference with static, dynamic and moment-predicted ranges.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-demo", help="write the demo model and datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib-size", type=int, default=512)
    p.add_argument("--test-size", type=int, default=1000)
    p.set_defaults(func=cmd_make_demo)

    p = sub.add_parser("calibrate", help="fit a calibration record")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate one scheme on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--calib", default=None, help="calibration record (static/prob)")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--corrupt", nargs="?", const="uniform", default=None,
        help="KIND:SEVERITY, or bare for a uniform draw per image",
    )
    p.add_argument("--int-kernels", action="store_true")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="all schemes side by side")
    p.add_argument("--model", required=True)
    p.add_argument("--calib-data", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--calib-samples", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", nargs="?", const="uniform", default=None)
    p.add_argument("--int-kernels", action="store_true")
    p.add_argument("--out", default=None, help="also write the table as CSV")
    _add_scheme_flags(p, with_scheme=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="estimator stride and calibration-size sweeps")
    p.add_argument("--model", required=True)
    p.add_argument("--calib-data", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_scheme_flags(p, with_scheme=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=CORRUPTION_KINDS)
    p.add_argument("--severity", type=int, required=True, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("cost", help="per-layer cost table")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
