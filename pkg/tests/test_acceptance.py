"""End-to-end acceptance checks, one test per criterion.

Each test records a single ``PASS``/``FAIL`` line (printed at the end of the
session by ``conftest.py``) and then asserts, so a failing criterion fails
the run. The end-to-end criteria drive the real command-line pipeline with
the shipped default config.
"""

from __future__ import annotations

import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import record_acceptance
from oracles import central_diff, nearest_level, rel_err, ste_surrogate

from tdq import numerics as nm
from tdq.calib import build_context, init_samples
from tdq.cli import main
from tdq.data import gaussian_ring
from tdq.denoiser import build_denoiser
from tdq.io import read_trace_csv
from tdq.metrics import parse_report, read_figure_data, spearman
from tdq.numerics import Param, RandomStream, Tensor, backward
from tdq.quant import QuantSpec, QuantState, fake_quant_ste, quantize
from tdq.schedule import ddim_sample, make_linear_schedule
from tdq.synthetic import run_synthetic
from tdq.temporal import GeneratorMLP, dynamic_fake_quant, encode_time, precompute_table

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2)
F64 = np.float64


def verdict(n: int, ok: bool, detail: str) -> None:
    record_acceptance(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def expected_results() -> dict[str, list[float]]:
    out = {}
    for line in (ROOT / "expected_results.txt").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, val = (p.strip() for p in line.split("=", 1))
            out[key] = [float(v) for v in val.split()]
    return out


# criterion 1 ---------------------------------------------------------------


def test_criterion_1_quantizer_matches_exhaustive_search():
    gen = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for bits in (2, 3, 4):
        for i in range(1000):
            spec = QuantSpec(bits, symmetric=bool(i % 2))
            x = (gen.normal(size=64) * gen.uniform(0.1, 3)).astype(np.float32)
            # a few exact midpoints so the tie rule is exercised
            s = float(gen.choice([0.25, 0.5, gen.uniform(0.05, 1.0)]))
            x[:4] = (np.arange(4) - 1.5) * s
            z = 0.0 if spec.symmetric else float(gen.integers(spec.n, spec.p + 1))
            xbar, _ = quantize(x, spec, QuantState(s, z))
            want = np.array([nearest_level(v, s, z, spec.n, spec.p) for v in x])
            mismatches += int(np.sum(xbar != want))
    dt = time.perf_counter() - t0
    verdict(1, mismatches == 0 and dt < 5.0, f"3000 tensors, {mismatches} mismatches, {dt:.2f} s (limit 5 s)")


# criterion 2 ---------------------------------------------------------------


def _grad_check(build, arrays, eps=1e-6) -> float:
    """Worst relative error between autograd and central differences (float64)."""
    params = [Param(np.array(a, dtype=F64), dtype=F64) for a in arrays]
    backward(build(*params))
    worst = 0.0
    for k, p in enumerate(params):

        def f(v, k=k):
            args = [Tensor(np.array(a, dtype=F64), dtype=F64) for a in arrays]
            args[k] = Tensor(v, dtype=F64)
            return float(build(*args).data)

        worst = max(worst, rel_err(p.grad, central_diff(f, arrays[k], eps)))
    return worst


def _weighted(t, w):
    return nm.tsum(nm.mul(t, Tensor(w, dtype=F64)))


def _numerics_cases(gen):
    x, W, b = gen.normal(size=(5, 4)), gen.normal(size=(3, 4)), gen.normal(size=3)
    a, c = gen.normal(size=(3, 4)), gen.normal(size=(1, 4))
    r = gen.normal(size=(3, 4))
    r[np.abs(r) < 1e-3] = 0.5
    w34, w53 = gen.normal(size=(3, 4)), gen.normal(size=(5, 3))
    return {
        "add": (lambda p, q: _weighted(nm.add(p, q), w34), [a, c]),
        "sub": (lambda p, q: _weighted(nm.sub(p, q), w34), [a, c]),
        "mul": (lambda p, q: _weighted(nm.mul(p, q), w34), [a, c]),
        "square": (lambda p: _weighted(nm.square(p), w34), [a]),
        "relu": (lambda p: _weighted(nm.relu(p), w34), [r]),
        "silu": (lambda p: _weighted(nm.silu(p), w34), [a]),
        "softplus": (lambda p: _weighted(nm.softplus(p * 4.0), w34), [a]),
        "linear": (lambda p, q, v: _weighted(nm.linear(p, q, v), w53), [x, W, b]),
        "matmul": (lambda p, q: _weighted(nm.matmul(p, q), w53), [x, W.T.copy()]),
        "mean": (lambda p: nm.mean(nm.square(p)), [x]),
        "concat": (lambda p, q: _weighted(nm.concat([p, q], axis=0), np.vstack([w34, w34])), [a, a + 1]),
        "mse": (lambda p, q: nm.mse(p, q), [x, x + gen.normal(size=x.shape)]),
    }


def _gen_param_case(gen, spec):
    """Generator-parameter gradient through the dynamic quantizer vs the STE surrogate."""
    g = GeneratorMLP(8, 6)
    t = int(gen.integers(0, 1000))
    enc = encode_time(t, 8)

    def pre(ps):
        a1 = enc[None] @ ps[0].T + ps[1]
        a2 = np.maximum(a1, 0) @ ps[2].T + ps[3]
        return a1, a2, np.maximum(a2, 0) @ ps[4].T + ps[5]

    def s_of(ps):
        return float(np.logaddexp(0.0, pre(ps)[2])[0, 0])

    # redraw until every ReLU is away from its kink, where the derivative is undefined
    while True:
        for p in g.params():
            p.data[...] = gen.normal(size=p.shape).astype(np.float32)
        g.biases[-1].data[...] = np.float32(gen.uniform(-3.0, 0.0))
        theta = [p.data.astype(F64) for p in g.params()]
        a1, a2, _ = pre(theta)
        if np.abs(a1).min() > 1e-4 and np.abs(a2).min() > 1e-4:
            break
    s0 = s_of(theta)
    z = 0.0 if spec.symmetric else float(gen.integers(spec.n, spec.p + 1))
    x = gen.uniform(s0 * (spec.n - 3 - z), s0 * (spec.p + 3 - z), size=64)
    u = x / s0 + z
    x = x[(np.abs(u - np.floor(u) - 0.5) > 2e-3) & (np.abs(u - spec.n) > 2e-3) & (np.abs(u - spec.p) > 2e-3)][:16]
    w = gen.normal(size=x.shape)
    backward(nm.tsum(nm.mul(dynamic_fake_quant(Tensor(x[None].astype(np.float32)), g, t, spec, z=z), Tensor(w[None].astype(np.float32)))))
    f, _ = ste_surrogate(x, s0, z, spec.n, spec.p)
    worst = 0.0
    for k, p in enumerate(g.params()):

        def loss(v, k=k):
            ps = list(theta)
            ps[k] = v
            return float(f(x, s_of(ps), z) @ w)

        worst = max(worst, rel_err(p.grad, central_diff(loss, theta[k], 1e-6)))
    return worst


def _lsq_case(gen, spec):
    s0 = float(gen.uniform(0.1, 2.0))
    z0 = 0.0 if spec.symmetric else float(gen.integers(spec.n, spec.p + 1))
    x0 = gen.uniform(s0 * (spec.n - 3 - z0), s0 * (spec.p + 3 - z0), size=32)
    u = x0 / s0 + z0
    x0 = x0[(np.abs(u - np.floor(u) - 0.5) > 2e-3) & (np.abs(u - spec.n) > 2e-3) & (np.abs(u - spec.p) > 2e-3)]
    w = gen.normal(size=x0.shape)
    s, z = Param(np.array(s0), dtype=F64), Param(np.array(z0), dtype=F64)
    backward(nm.tsum(nm.mul(fake_quant_ste(Tensor(x0, dtype=F64), s, z, spec), Tensor(w, dtype=F64))))
    f, _ = ste_surrogate(x0, s0, z0, spec.n, spec.p)
    worst = rel_err(s.grad, central_diff(lambda v: float(f(x0, v[0], z0) @ w), np.array([s0]), 1e-6))
    if not spec.symmetric:
        worst = max(worst, rel_err(z.grad, central_diff(lambda v: float(f(x0, s0, v[0]) @ w), np.array([z0]), 1e-6)))
    return worst


def test_criterion_2_gradient_suite():
    gen = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for _ in range(100):
        for name, (build, arrays) in _numerics_cases(gen).items():
            worst[name] = max(worst.get(name, 0.0), _grad_check(build, arrays))
    for i in range(100):
        spec = QuantSpec(int(gen.integers(2, 5)), symmetric=bool(i % 2))
        worst["generator"] = max(worst.get("generator", 0.0), _gen_param_case(gen, spec))
        worst["lsq-s"] = max(worst.get("lsq-s", 0.0), _lsq_case(gen, spec))
    dt = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    top = max(worst, key=worst.get)
    verdict(2, not bad and dt < 30.0, f"{len(worst)} gradient families x 100 cases, worst rel err {worst[top]:.2e} ({top}), {dt:.1f} s (limit 30 s)")


# criterion 3 ---------------------------------------------------------------


def test_criterion_3_table_sampling_is_bit_identical_to_live():
    t0 = time.perf_counter()
    sched = make_linear_schedule()
    model = build_denoiser(2, 128, 3, 64, RandomStream(0))
    taps, _ = init_samples(model, gaussian_ring(2000, RandomStream(1)), sched, RandomStream(2), n=500)
    ctx = build_context(model, "tdq", 4, 4, taps, RandomStream(3))
    for i, g in enumerate(ctx.generators().values()):
        # a non-constant head so the lattice really changes with t
        g.weights[-1].data[...] = RandomStream(10 + i).normal(g.weights[-1].shape) * np.float32(0.05)
    ctx.table = precompute_table(ctx.generators(), sched.T, ctx.zero_offsets(), ctx.t_max)
    same = {}
    for n in (10, 50, 100):
        live = ddim_sample(model, n, sched, RandomStream(4), "tdq-live", ctx, n_samples=512)
        table = ddim_sample(model, n, sched, RandomStream(4), "tdq-table", ctx, n_samples=512)
        same[n] = live.tobytes() == table.tobytes()
    dt = time.perf_counter() - t0
    verdict(3, all(same.values()) and dt < 120.0, f"bit-identical at n_steps {same}, {dt:.1f} s (limit 120 s)")


# criteria 4 and 5 ------------------------------------------------------------


def test_criterion_4_tdq_dominates_static_on_linear_stream():
    t0 = time.perf_counter()
    res = run_synthetic("linear", RandomStream(404))
    dt = time.perf_counter() - t0
    vs_static, vs_oracle = res.tdq_mse / res.static_mse, res.tdq_mse / res.oracle_mse
    ok = vs_static <= 1.02 and vs_oracle <= 1.25 and dt < 120.0
    verdict(4, ok, f"TDQ/static {vs_static:.3f} (<= 1.02), TDQ/per-step oracle {vs_oracle:.3f} (<= 1.25), {dt:.1f} s (limit 120 s)")


def test_criterion_5_two_regime_interval_ratio():
    res = run_synthetic("two-regime", RandomStream(505))
    ratio = res.regime_ratio()
    verdict(5, abs(ratio - 4.0) <= 0.25 * 4.0, f"mean interval ratio between regimes {ratio:.3f} (target 4.0 +- 25%)")


# criteria 6, 7, 8: the full pipeline ------------------------------------------


def _cli(out: Path, *args: str) -> None:
    code = main([args[0], "--out", str(out), *args[1:]])
    assert code == 0, f"tdq {' '.join(args)} failed"


def _w2(report: Path) -> dict[str, float]:
    return {r["mode"]: float(r["w2"]) for r in parse_report(report.read_text())}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One FP model (seed 0) quantized with three seeds, scored at 100 and 10 steps."""
    base = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    _cli(base, "train-fp", "--seed", "0")
    fp_seconds = time.perf_counter() - t0
    _cli(base, "trace", "--seed", "0")
    scores: dict[tuple[str, int], list[float]] = {}
    for seed in SEEDS:
        d = base / f"s{seed}"
        d.mkdir()
        shutil.copy(base / "fp.ckpt", d / "fp.ckpt")
        if seed == 0:
            shutil.copy(base / "trace.csv", d / "trace.csv")
        s = str(seed)
        for mode in ("static-lsq", "tdq"):
            _cli(d, "qat", "--seed", s, "--mode", mode)
        for mode in ("minmax", "tdq"):
            _cli(d, "ptq", "--seed", s, "--mode", mode)
        _cli(d, "export-table", "--seed", s, "--from", "qat")
        for n in (100, 10):
            _cli(d, "eval", "--seed", s, "--from", "qat", "--mode", "static-lsq,tdq", "--n-steps", str(n))
            for mode, w2 in _w2(d / f"report_qat_w4a4_n{n}.txt").items():
                scores.setdefault((f"qat-{mode}", n), []).append(w2)
        _cli(d, "eval", "--seed", s, "--from", "ptq", "--mode", "minmax,tdq", "--n-steps", "100")
        for mode, w2 in _w2(d / "report_ptq_w4a4_n100.txt").items():
            scores.setdefault((f"ptq-{mode}", 100), []).append(w2)
    return {"base": base, "scores": scores, "fp_seconds": fp_seconds}


def _fmt(v):
    return "[" + ", ".join(f"{x:.3f}" for x in v) + f"] mean {np.mean(v):.3f}"


def test_criterion_6_end_to_end_ordering(pipeline):
    sc = pipeline["scores"]
    fp = expected_results()["fp_w2_n100_mean"][0]
    qat_t, qat_s = np.mean(sc[("qat-tdq", 100)]), np.mean(sc[("qat-static-lsq", 100)])
    ptq_t, ptq_m = np.mean(sc[("ptq-tdq", 100)]), np.mean(sc[("ptq-minmax", 100)])
    checks = {
        "TDQ-QAT <= static-LSQ-QAT": qat_t <= qat_s,
        "TDQ-PTQ <= min-max-PTQ": ptq_t <= ptq_m,
        "TDQ-QAT <= 1.5 x FP": qat_t <= 1.5 * fp,
        "FP training < 10 min": pipeline["fp_seconds"] < 600,
    }
    for key in sorted(sc):
        record_acceptance(f"    W2 {key[0]:<16} n={key[1]:<3} {_fmt(sc[key])}")
    failed = [k for k, ok in checks.items() if not ok]
    detail = (
        f"QAT {qat_t:.3f} vs {qat_s:.3f}, PTQ {ptq_t:.3f} vs {ptq_m:.3f}, FP baseline {fp:.3f} (limit {1.5 * fp:.3f}), "
        f"FP train {pipeline['fp_seconds']:.0f} s" + (f"; failed: {'; '.join(failed)}" if failed else "")
    )
    verdict(6, not failed, detail)


def test_criterion_7_step_count_generalization(pipeline):
    sc = pipeline["scores"]
    ratio = {m: np.mean(sc[(f"qat-{m}", 10)]) / np.mean(sc[(f"qat-{m}", 100)]) for m in ("tdq", "static-lsq")}
    per_seed = {m: np.array(sc[(f"qat-{m}", 10)]) / np.array(sc[(f"qat-{m}", 100)]) for m in ratio}
    detail = (
        f"W2(10)/W2(100) TDQ {ratio['tdq']:.3f} vs static-LSQ {ratio['static-lsq']:.3f}; "
        f"per seed TDQ {np.round(per_seed['tdq'], 3).tolist()} static {np.round(per_seed['static-lsq'], 3).tolist()}"
    )
    verdict(7, ratio["tdq"] <= ratio["static-lsq"], detail)


def test_criterion_8_trace_reproduction(pipeline):
    d = pipeline["base"] / "s0"
    trace = read_trace_csv(d / "trace.csv")
    variation = {}
    for site in trace.sites:
        _, rng = trace.range_series(site)
        variation[site] = float(rng.max() / max(rng.min(), 1e-12))
    rho = {}
    for fname in sorted((d / "figures_qat_w4a4").glob("figure_*.csv")):
        fig = read_figure_data(fname)
        rho[fname.stem.removeprefix("figure_")] = spearman(fig["interval"], fig["act_max"] - fig["act_min"])
    varied = max(variation.values()) >= 2.0
    correlated = sum(r > 0.5 for r in rho.values()) >= len(rho) / 2
    detail = (
        "range variation " + ", ".join(f"{k} {v:.2f}x" for k, v in variation.items())
        + "; spearman " + ", ".join(f"{k} {v:.2f}" for k, v in rho.items())
    )
    verdict(8, varied and correlated and len(rho) == len(variation), detail)


# criterion 9 ---------------------------------------------------------------

INVARIANTS = [
    "test_quant.py::test_quantize_idempotent_bounded_and_in_range",
    "test_temporal.py::test_encoding_bounded_with_pythagorean_pairs",
    "test_temporal.py::test_generator_positive_over_random_parameters",
    "test_numerics.py::test_softplus_strictly_positive",
    "test_schedule.py::test_alpha_bar_strictly_decreasing_in_unit_interval",
    "test_calib.py::test_calibration_set_size_and_determinism",
    "test_calib.py::test_calibration_full_coverage",
    "test_denoiser.py::test_trace_merge_order_independent",
    "test_metrics.py::test_w2_is_a_metric",
    "test_io.py::test_blob_round_trip",
    "test_io.py::test_table_csv_round_trip_is_bit_exact",
    "test_io.py::test_samples_csv_round_trip",
    "test_io.py::test_trace_csv_and_raw_round_trip",
    "test_io.py::test_calibration_round_trip",
]


def test_criterion_9_invariant_suites():
    here = Path(__file__).parent
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *(str(here / n) for n in INVARIANTS)],
        capture_output=True,
        text=True,
        cwd=ROOT,
    )
    dt = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    verdict(9, proc.returncode == 0 and dt < 60.0, f"{len(INVARIANTS)} property suites: {summary}, {dt:.1f} s (limit 60 s)")
