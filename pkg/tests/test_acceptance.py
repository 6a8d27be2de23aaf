"""Ten go/no-go checks for the whole engine, one visible verdict line each.

Each test prints `[C#] PASS ...` (or FAIL) outside pytest's capture so the
verdict shows up in a plain `pytest -v` run, then asserts. Tolerances are part
of the project contract; do not loosen them to make a run green.
"""

import math
import time

import numpy as np
import pytest

from quantlab.corruptions import corrupt_dataset, make_corruption
from quantlab.costmodel import estimator_ops, memory_overhead, model_cost
from quantlab.intkernel import conv2d_s8, isqrt, linear_s8, widen_bias
from quantlab.moments import (
    MacCounter,
    MomentEstimate,
    calibrate_alpha_beta,
    estimate_conv,
    estimate_linear,
    fit_weight_stats,
)
from quantlab.nn import ModelGraph, forward_float, im2col, linear
from quantlab.pipeline import evaluate
from quantlab.quant import (
    dequantize,
    qparams_zero_anchored,
    quantize,
    quantize_tensor,
)
from quantlab.schemes import (
    SchemeKind,
    calibrate_probabilistic,
    calibrate_static,
    output_params,
)
from quantlab.tensor import Tensor


@pytest.fixture()
def verdict(capsys):
    def emit(tag: str, ok: bool, detail: str) -> None:
        line = f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}"
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        assert ok, line

    return emit


def _t(a):
    return Tensor.from_array(np.asarray(a, dtype=np.float64))


def _tensor_stats(mean, var):
    base = fit_weight_stats(_t([[0.0]]), "tensor")
    return type(base)(mode="tensor", mean=np.array([mean]), var=np.array([var]))


def test_c01_quantization_algebra(verdict):
    """Round-trip error and monotonicity of the affine map at scale."""
    rng = np.random.default_rng(0xACC1)
    t0 = time.perf_counter()
    n = 10**6
    ms = rng.uniform(-40, 40, size=n)
    spans = rng.uniform(0, 80, size=n)
    xs = ms + spans * rng.random(n)
    worst = -np.inf
    for i in range(n):
        m = ms[i]
        big = m + spans[i]
        p = qparams_zero_anchored(m, big, 8)
        x2 = dequantize(quantize(xs[i], p), p)
        bound = p.scale / 2 + 4 * math.ulp(max(abs(min(m, 0.0)), abs(max(big, 0.0))))
        worst = max(worst, abs(x2 - xs[i]) - bound)
        if worst > 0:
            break
    mono_bad = 0
    for i in range(10**5):
        m = ms[i]
        big = m + spans[i]
        p = qparams_zero_anchored(m, big, 8)
        a, b = sorted(rng.uniform(m - 1, big + 1, size=2))
        if quantize(a, p) > quantize(b, p):
            mono_bad += 1
    dt = time.perf_counter() - t0
    ok = worst <= 0 and mono_bad == 0 and dt < 10.0
    verdict(
        "C1",
        ok,
        f"1e6 round-trips within s/2+4ulp (worst slack {-worst:.2e}), "
        f"{mono_bad} monotonicity breaks, {dt:.1f}s (<10s)",
    )


def test_c02_linear_surrogate_vs_monte_carlo(verdict):
    """Predicted output moments against 1e4-draw weight ensembles."""
    rng = np.random.default_rng(0xACC2)
    t0 = time.perf_counter()
    cases, draws = 100, 10_000
    hits = 0
    for _ in range(cases):
        d = int(rng.integers(2, 65))
        x = rng.uniform(-1, 1, size=d)
        mu = float(rng.uniform(-1, 1))
        var = float(rng.uniform(0.05, 1.0))
        est = estimate_linear(_t(x), _tensor_stats(mu, var))
        y = rng.normal(mu, math.sqrt(var), size=(draws, d)) @ x
        se_mean = y.std(ddof=1) / math.sqrt(draws)
        v_hat = float(y.var(ddof=1))
        se_var = v_hat * math.sqrt(2.0 / (draws - 1))
        if (
            abs(est.mean - float(y.mean())) <= 3 * se_mean
            and abs(est.var - v_hat) <= 3 * se_var
        ):
            hits += 1
    dt = time.perf_counter() - t0
    ok = hits >= 95 and dt < 60.0
    verdict("C2", ok, f"{hits}/100 cases within 3 SE (need >=95), {dt:.1f}s (<60s)")


def test_c03_conv_surrogate_matches_triple_loop(verdict):
    """Dense-lattice window sums, bit for bit against a naive loop."""
    rng = np.random.default_rng(0xACC3)
    mismatches = 0
    for _ in range(50):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(5, 17))
        w = int(rng.integers(5, 17))
        kh = int(rng.integers(1, min(5, h) + 1))
        kw = int(rng.integers(1, min(5, w) + 1))
        x = rng.normal(size=(c, h, w))
        mu, var = 0.3, 0.7
        est = estimate_conv(_t(x), _tensor_stats(mu, var), (kh, kw), (1, 1), (0, 0), 1.0)
        oh, ow = h - kh + 1, w - kw + 1
        k = 0
        for i in range(oh):
            for j in range(ow):
                s1 = 0.0
                s2 = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            v = x[ci, i + a, j + b]
                            s1 += v
                            s2 += v * v
                if est.means[k, 0] != mu * s1 or est.vars[k, 0] != var * s2:
                    mismatches += 1
                k += 1
    verdict("C3", mismatches == 0, f"50 geometries bit-identical ({mismatches} mismatches)")


def test_c04_probabilistic_scale_homogeneity(verdict):
    """Bias-free linear layers: input x c must scale s_out by exactly c."""
    rng = np.random.default_rng(0xACC4)
    tol = 2.0**-40
    worst = 0.0
    z_moves = 0
    for _ in range(10):
        d, h_out = int(rng.integers(4, 64)), int(rng.integers(2, 8))
        model = ModelGraph.from_layers([linear(_t(rng.normal(size=(h_out, d))))], (d,))
        cfg = SchemeKind("probabilistic")
        rec = calibrate_probabilistic(
            model, [_t(rng.uniform(-1, 1, size=d)) for _ in range(8)], cfg
        )
        x = rng.uniform(-1, 1, size=d)
        base, _ = output_params(
            cfg, rec, 0, model.layers[0], quantize_tensor(_t(x), "tensor", 8)
        )
        for c in (0.5, 2.0, 10.0):
            scaled, _ = output_params(
                cfg, rec, 0, model.layers[0], quantize_tensor(_t(c * x), "tensor", 8)
            )
            worst = max(worst, abs(scaled.scale / (c * base.scale) - 1.0))
            z_moves += int(scaled.zero_point != base.zero_point)
    ok = worst <= tol and z_moves == 0
    verdict(
        "C4",
        ok,
        f"s_out rel dev {worst:.2e} (<=2^-40={tol:.2e}), {z_moves} zero-point moves",
    )


def test_c05_coverage_calibration_on_gaussians(verdict):
    """(alpha, beta) fit at target 0.954 with exact surrogate moments."""
    rng = np.random.default_rng(0xACC5)
    preacts = [rng.normal(size=8192) for _ in range(500)]
    ests = [MomentEstimate(0.0, 1.0)] * len(preacts)
    ip = calibrate_alpha_beta(preacts, ests, 0.954)
    held = rng.normal(size=1_000_000)
    cov = float(np.mean((held >= -ip.alpha) & (held <= ip.beta)))
    ok = (
        abs(ip.alpha - 2.0) <= 0.25 + 1e-12
        and abs(ip.beta - 2.0) <= 0.25 + 1e-12
        and abs(cov - 0.954) <= 0.01
    )
    verdict(
        "C5",
        ok,
        f"alpha={ip.alpha} beta={ip.beta} (grid step of 2.0), "
        f"held-out coverage {cov:.4f} within 0.954 +/- 0.01",
    )


def test_c06_gamma_scaling_of_estimator_cost(verdict):
    """Lattice stride 4 vs 1 on a 32x32 conv output, counter vs closed form."""
    rng = np.random.default_rng(0xACC6)
    x = _t(rng.uniform(0, 1, size=(2, 34, 34)))  # 3x3 kernel -> 32x32 output
    ws = _tensor_stats(0.2, 0.4)
    macs = {}
    exact = True
    for g in (1.0, 4.0):
        counter = MacCounter()
        estimate_conv(x, ws, (3, 3), (1, 1), (0, 0), g, counter)
        macs[g] = counter.macs
        want = estimator_ops("probabilistic", "conv2d", (2, 34, 34), (4, 32, 32), (3, 3), g)
        exact = exact and counter.macs == want
    ratio = macs[1.0] / macs[4.0]
    ok = abs(ratio / 16.0 - 1.0) <= 0.05 and exact
    verdict(
        "C6",
        ok,
        f"instrumented ratio {ratio:.2f} within 5% of 16, "
        f"closed-form match exact={exact}",
    )


def test_c07_memory_structure_per_layer(demo_full, verdict):
    """Peak widened entries and overhead closed forms on the demo CNN."""
    model, calib, test = demo_full
    ds = test.subset(range(8))
    stat_cfg = SchemeKind("static")
    prob_cfg = SchemeKind("probabilistic")
    stat_rec = calibrate_static(model, calib, stat_cfg)
    prob_rec = calibrate_probabilistic(model, calib, prob_cfg)
    _, outs = forward_float(model, test.samples[0])
    entries = {
        idx: int(np.prod(outs[idx].shape))
        for idx, layer in enumerate(model.layers)
        if layer.kind in ("conv2d", "linear")
    }
    dyn = evaluate(model, ds, SchemeKind("dynamic"))
    stat = evaluate(model, ds, stat_cfg, stat_rec)
    prob = evaluate(model, ds, prob_cfg, prob_rec)
    structural = (
        dyn.layer_peak == entries
        and all(v == 1 for v in stat.layer_peak.values())
        and all(v == 1 for v in prob.layer_peak.values())
        and set(stat.layer_peak) == set(entries)
        and set(prob.layer_peak) == set(entries)
    )
    formulas = True
    for scheme, expect in (
        ("static", lambda h: 96),
        ("dynamic", lambda h: 32 * h + 96),
        ("probabilistic", lambda h: 160),
    ):
        for cost in model_cost(model, SchemeKind(scheme)):
            h = entries[cost.layer_index]
            if cost.mem_overhead_bits != expect(h):
                formulas = False
            if memory_overhead(scheme, h, 32) != expect(h):
                formulas = False
    ok = structural and formulas
    verdict(
        "C7",
        ok,
        f"peak entries per layer dyn={dict(dyn.layer_peak)} others=1, "
        f"overhead forms 3b'/b'h+3b'/5b' exact={formulas}",
    )


def test_c08_integer_path_parity(verdict):
    """s8 kernels vs real emulation on 1e3 tiny layers; isqrt sweep."""
    rng = np.random.default_rng(0xACC8)
    worst = 0
    for lay in range(1000):
        if lay % 2 == 0:
            d, h_out = int(rng.integers(2, 12)), int(rng.integers(1, 6))
            x = rng.uniform(-1, 1, size=d)
            w = rng.normal(size=(h_out, d))
            x_q = quantize_tensor(_t(x), "tensor", 8)
            w_q = quantize_tensor(_t(w), "tensor", 8)
            x_hat = (x_q.array() - x_q.params.zero_point) * x_q.params.scale
            w_hat = (w_q.array() - w_q.params.zero_point) * w_q.params.scale
            y = w_hat @ x_hat
            out_p = qparams_zero_anchored(float(y.min()), float(y.max()), 8)
            got = linear_s8(x_q, w_q, None, out_p).array()
        else:
            c = int(rng.integers(1, 3))
            hw = int(rng.integers(3, 8))
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
            got = conv2d_s8(x_q, w_q, b_int, out_p).array()
        lo, hi = -128, 127
        ref = np.clip(np.rint(y / out_p.scale) + out_p.zero_point, lo, hi)
        worst = max(worst, int(np.max(np.abs(got - ref))))
    isqrt_bad = sum(1 for v in range(1 << 20) if isqrt(v) != math.isqrt(v))
    ok = worst <= 1 and isqrt_bad == 0
    verdict(
        "C8",
        ok,
        f"1e3 layers max deviation {worst} grid step(s) (<=1), "
        f"isqrt exhaustive n<2^20 errors={isqrt_bad}",
    )


def test_c09_scheme_ordering_under_corruption(demo_full, verdict):
    """Dynamic >= static, probabilistic close behind, on 1000 test images."""
    t0 = time.perf_counter()
    model, calib, test = demo_full
    cfg = dict(granularity="tensor", bit_width=5, coverage_target=0.999)
    stat_cfg = SchemeKind("static", **{k: v for k, v in cfg.items() if k != "coverage_target"})
    dyn_cfg = SchemeKind("dynamic", **{k: v for k, v in cfg.items() if k != "coverage_target"})
    prob_cfg = SchemeKind("probabilistic", **cfg)
    stat_rec = calibrate_static(model, calib, stat_cfg)
    prob_rec = calibrate_probabilistic(model, calib, prob_cfg)

    def accs(ds):
        return (
            evaluate(model, ds, dyn_cfg).accuracy,
            evaluate(model, ds, stat_cfg, stat_rec).accuracy,
            evaluate(model, ds, prob_cfg, prob_rec).accuracy,
        )

    d0, s0, p0 = accs(test)
    clean_gap = d0 - s0
    ordering = d0 >= s0
    prob_close = p0 >= d0 - 0.015
    worst_gap_drop = 0.0
    worst_prob_lag = d0 - p0
    for kind in ("contrast", "brightness"):
        for sev in range(1, 6):
            ds = corrupt_dataset(test, make_corruption(kind, sev, seed=7))
            d, s, p = accs(ds)
            worst_gap_drop = max(worst_gap_drop, clean_gap - (d - s))
            worst_prob_lag = max(worst_prob_lag, d - p)
    dt = time.perf_counter() - t0
    ok = (
        len(test) >= 1000
        and ordering
        and prob_close
        and worst_gap_drop <= 0.0
        and worst_prob_lag <= 0.02
        and dt < 300.0
    )
    verdict(
        "C9",
        ok,
        f"clean d/s/p={d0:.3f}/{s0:.3f}/{p0:.3f}; gap never shrinks "
        f"(worst drop {worst_gap_drop:+.4f}); prob lag <=2pts "
        f"(worst {worst_prob_lag:+.4f}); {dt:.0f}s (<300s)",
    )


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_c10_sensitivity_sweeps(demo_full, verdict):
    """Accuracy must be flat across the stride lattice and calib size."""
    model, calib, test = demo_full
    ds = test.subset(range(500))
    gamma_accs = []
    for g in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0):
        cfg = SchemeKind(
            "probabilistic", granularity="channel", bit_width=5,
            gamma=g, coverage_target=0.999,
        )
        rec = calibrate_probabilistic(model, calib, cfg)
        gamma_accs.append(evaluate(model, ds, cfg, rec).accuracy)
    gamma_spread = max(gamma_accs) - min(gamma_accs)

    size_accs = []
    cfg = SchemeKind("probabilistic", bit_width=5, coverage_target=0.999)
    rng = np.random.default_rng(0xACCA)
    for size in (16, 32, 64, 128):
        for _ in range(3):
            idx = rng.permutation(len(calib))[:size]
            rec = calibrate_probabilistic(model, calib.subset([int(i) for i in idx]), cfg)
            size_accs.append(evaluate(model, ds, cfg, rec).accuracy)
    size_spread = max(size_accs) - min(size_accs)
    ok = gamma_spread < 0.01 and size_spread < 0.015
    verdict(
        "C10",
        ok,
        f"gamma 1..32 spread {gamma_spread:.4f} (<0.01), "
        f"calib-size spread {size_spread:.4f} (<0.015)",
    )
