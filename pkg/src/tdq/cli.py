"""Command-line pipeline: train, trace, quantize, export, sample, evaluate.

Every subcommand reads a ``key = value`` config (``--config``), writes into
``--out`` and refuses to replace existing outputs unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import calib, io, metrics, synthetic
from .config import ConfigError, RunConfig, load_config
from .data import gaussian_ring
from .denoiser import build_denoiser, record_trace
from .numerics import RandomStream, no_grad, seeded_rng
from .schedule import ddim_sample, ddim_timesteps, forward_diffuse, make_linear_schedule
from .temporal import precompute_table

log = logging.getLogger("tdq")

DEFAULT_CONFIG = Path(__file__).with_name("default.cfg")
QAT_MODES = ("static-lsq", "tdq")
PTQ_MODES = ("minmax", "static-lsq", "tdq")
EVAL_MODES = ("minmax", "static-lsq", "input-dynamic", "tdq")
SAMPLE_MODES = ("fp", "minmax", "static-lsq", "input-dynamic", "tdq-live", "tdq-table")
REPORT_HEADER = "# tdq report v1"


class CliError(Exception):
    pass


class Run:
    """Resolved config plus the paths and random streams derived from it."""

    def __init__(self, cfg: RunConfig, out: Path, force: bool):
        self.cfg = cfg
        self.out = out
        self.force = force
        self.root = seeded_rng(cfg.seed)
        self.sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    def data(self) -> np.ndarray:
        c = self.cfg
        return gaussian_ring(c.n_data, self.root.split("data"), c.data_modes, c.data_radius, c.data_std)

    def ground_truth(self, n: int, rng: RandomStream) -> np.ndarray:
        c = self.cfg
        return gaussian_ring(n, rng, c.data_modes, c.data_radius, c.data_std)

    def need(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise CliError(f"missing prerequisite file: {path}")
        return path

    def target(self, name: str) -> Path:
        path = self.out / name
        if path.exists() and not self.force:
            raise CliError(f"{path} exists; pass --force to overwrite")
        return path

    @property
    def tag(self) -> str:
        return f"w{self.cfg.bits_w}a{self.cfg.bits_a}"

    @property
    def clip(self) -> float | None:
        return self.cfg.clip_x0 if self.cfg.clip_x0 > 0 else None

    def load_fp(self):
        model, _, _ = io.load_checkpoint(self.need("fp.ckpt"))
        return model


def _meta(run: Run, **extra) -> dict:
    return {"seed": run.cfg.seed, "config": run.cfg.resolved(), **extra}


def cmd_train_fp(run: Run, args) -> None:
    c = run.cfg
    out = run.target("fp.ckpt")
    model = build_denoiser(2, c.hidden, c.depth, c.embed_dim, rng=run.root.split("init"))
    losses = calib.train_fp(model, run.data(), run.sched, c.fp_steps, c.fp_lr, run.root.split("fp"), c.batch_size)
    log.info("fp training: first loss %.4f, last-100 mean %.4f", losses[0], float(np.mean(losses[-100:])))
    io.save_checkpoint(out, model, meta=_meta(run, kind="fp"))
    print(out)


def cmd_trace(run: Run, args) -> None:
    c = run.cfg
    model = run.load_fp()
    out = run.target("trace.csv")
    trace = record_trace(model, run.data(), run.sched, range(0, c.T, c.trace_stride), run.root.split("trace"), c.trace_samples)
    io.write_trace_csv(out, trace)
    print(out)


def _mode(args, allowed, default=None) -> str:
    mode = args.mode or default
    if mode not in allowed:
        raise CliError(f"--mode must be one of {', '.join(allowed)} (got {mode!r})")
    return mode


def cmd_qat(run: Run, args) -> None:
    c = run.cfg
    mode = _mode(args, QAT_MODES, "tdq")
    out = run.target(f"qat_{mode}_{run.tag}.ckpt")
    model = run.load_fp()
    data = run.data()
    taps, _ = calib.init_samples(model, data, run.sched, run.root.split("init-samples"), c.n_init)
    ctx = calib.build_context(model, mode, c.bits_w, c.bits_a, taps, run.root.split("ctx"), weight_style="lsq", gen_hidden=c.gen_hidden)
    losses = calib.qat_train(
        model, ctx, data, run.sched, c.qat_steps, c.qat_lr, run.root.split("qat"), lr_gen=c.qat_lr_gen, lr_quant=c.qat_lr_quant, batch_size=c.batch_size
    )
    log.info("qat %s: last-100 mean loss %.4f, floor clamps %d", mode, float(np.mean(losses[-100:])), ctx.floor_hits)
    io.save_checkpoint(out, model, ctx, meta=_meta(run, kind="qat", mode=mode))
    print(out)


def _calibration_set(run: Run, model) -> calib.CalibrationSet:
    """Load the calibration set if already on disk for this seed, else sample and save it."""
    c = run.cfg
    path = run.out / f"calib_s{c.seed}.tdqt"
    if path.exists() and not run.force:
        calset = io.load_calibration(path)
        if calset.seed != c.seed or len(calset) != c.calib_images * c.calib_t_per_image:
            raise CliError(f"{path} does not match the config; pass --force to regenerate")
        return calset
    calset = calib.sample_calibration(model, run.sched, c.calib_images, c.calib_t_per_image, run.root.split("calib"), source="fp.ckpt")
    io.save_calibration(path, calset)
    return calset


def cmd_ptq(run: Run, args) -> None:
    c = run.cfg
    mode = _mode(args, PTQ_MODES, "tdq")
    out = run.target(f"ptq_{mode}_{run.tag}.ckpt")
    model = run.load_fp()
    calset = _calibration_set(run, model)
    taps: dict[str, np.ndarray] = {}
    with no_grad():
        model(calset.x, calset.t, taps=taps)
    ctx = calib.build_context(model, mode, c.bits_w, c.bits_a, taps, run.root.split("ctx"), weight_style="minmax", gen_hidden=c.gen_hidden)
    if mode != "minmax":
        report = calib.ptq_reconstruct(model, ctx, calset, c.ptq_iters, c.ptq_lr, run.root.split("ptq"), c.batch_size)
        for b in report.blocks:
            log.info("block %s: loss %.4g -> %.4g in %d iters%s", b.site, b.entry_loss, b.exit_loss, b.iters, " (early stop)" if b.stopped_early else "")
    io.save_checkpoint(out, model, ctx, meta=_meta(run, kind="ptq", mode=mode))
    print(out)


def _tdq_source(args) -> str:
    if args.source not in ("qat", "ptq"):
        raise CliError(f"--from must be qat or ptq (got {args.source!r})")
    return args.source


def cmd_export_table(run: Run, args) -> None:
    src = _tdq_source(args)
    _, ctx, _ = io.load_checkpoint(run.need(f"{src}_tdq_{run.tag}.ckpt"))
    out = run.target(f"table_{src}_tdq_{run.tag}.csv")
    table = precompute_table(ctx.generators(), run.cfg.T, ctx.zero_offsets(), ctx.t_max)
    io.write_table_csv(out, table)
    print(out)
    trace_path = run.out / "trace.csv"
    if trace_path.exists():
        fig_dir = run.out / f"figures_{src}_{run.tag}"
        if fig_dir.exists() and not run.force:
            raise CliError(f"{fig_dir} exists; pass --force to overwrite")
        trace = io.read_trace_csv(trace_path)
        for fname in metrics.export_figure_data(trace, table, fig_dir):
            print(fname)
        for site, rho in metrics.interval_range_correlation(trace, table).items():
            log.info("interval/range spearman at %s: %.3f", site, rho)


def _quantized(run: Run, args, mode: str):
    """(model, ctx, ddim quant_mode) for a sample/eval mode name."""
    c = run.cfg
    if mode == "fp":
        return run.load_fp(), None, "fp"
    if mode == "input-dynamic":
        model = run.load_fp()
        ctx = calib.build_context(model, "input-dynamic", c.bits_w, c.bits_a, {}, run.root.split("ctx"), weight_style="minmax")
        return model, ctx, "static"
    src = _tdq_source(args)
    if mode == "minmax":
        model, ctx, _ = io.load_checkpoint(run.need(f"ptq_minmax_{run.tag}.ckpt"))
        return model, ctx, "static"
    if mode == "static-lsq":
        model, ctx, _ = io.load_checkpoint(run.need(f"{src}_static-lsq_{run.tag}.ckpt"))
        return model, ctx, "static"
    model, ctx, _ = io.load_checkpoint(run.need(f"{src}_tdq_{run.tag}.ckpt"))
    if mode in ("tdq", "tdq-live"):
        return model, ctx, "tdq-live"
    ctx.table = io.read_table_csv(run.need(f"table_{src}_tdq_{run.tag}.csv"))
    if ctx.table.T != c.T:
        raise CliError(f"interval table covers {ctx.table.T} steps, config has T = {c.T}")
    return model, ctx, "tdq-table"


def _samples(run: Run, model, ctx, quant_mode: str, n_steps: int) -> np.ndarray:
    return ddim_sample(
        model, n_steps, run.sched, run.root.split("sample"), quant_mode=quant_mode, ctx=ctx, n_samples=run.cfg.n_samples, clip_x0=run.clip
    )


def cmd_sample(run: Run, args) -> None:
    mode = _mode(args, SAMPLE_MODES, "fp")
    n_steps = run.cfg.n_steps
    if not 1 <= n_steps <= run.cfg.T:
        raise CliError(f"--n-steps must be in [1, {run.cfg.T}] (got {n_steps})")
    src = "" if mode in ("fp", "input-dynamic", "minmax") else f"{_tdq_source(args)}_"
    out = run.target(f"samples_{src}{mode}_{run.tag}_n{n_steps}.csv")
    model, ctx, qm = _quantized(run, args, mode)
    io.write_samples_csv(out, _samples(run, model, ctx, qm, n_steps))
    print(out)


def evaluate(run: Run, model, ctx, mode: str, quant_mode: str, n_steps: int) -> metrics.EvalReport:
    """W2 to fresh ground truth plus per-site, per-step activation error on noised data."""
    c = run.cfg
    report = metrics.EvalReport(mode=mode, bits_w=c.bits_w, bits_a=c.bits_a, seed=c.seed, n_steps=n_steps)
    x = _samples(run, model, ctx, quant_mode, n_steps)
    report.w2 = metrics.wasserstein2_pointsets(x, run.ground_truth(len(x), run.root.split("ground-truth")))
    if ctx is None:
        return report
    probe = run.root.split("probe")
    data = run.data()
    source = "table" if quant_mode == "tdq-table" else "live"
    for t in ddim_timesteps(c.T, n_steps):
        sub = probe.split(f"t{int(t)}")
        x0 = data[sub.integers(0, len(data), 256)]
        x_t = forward_diffuse(x0, int(t), sub.normal(x0.shape), run.sched)
        for site, (err, sqnr) in metrics.activation_errors(model, ctx, x_t, int(t), source).items():
            report.site_mse[(site, int(t))] = err
            report.site_sqnr[(site, int(t))] = sqnr
    return report


def cmd_eval(run: Run, args) -> None:
    modes = args.mode.split(",") if args.mode else list(EVAL_MODES)
    bad = [m for m in modes if m not in SAMPLE_MODES + ("tdq",)]
    if bad:
        raise CliError(f"unknown eval mode(s): {', '.join(bad)}")
    src = _tdq_source(args)
    out = run.target(f"report_{src}_{run.tag}_n{run.cfg.n_steps}.txt")
    loaded = [(mode, *_quantized(run, args, mode)) for mode in modes]
    lines = [REPORT_HEADER]
    for mode, model, ctx, qm in loaded:
        rep = evaluate(run, model, ctx, mode, qm, run.cfg.n_steps)
        lines.append(rep.summary_line())
        print(lines[-1])
    out.write_text("\n".join(lines) + "\n")
    print(out)


def cmd_bench_synthetic(run: Run, args) -> None:
    out = run.target("synthetic.txt")
    lines = [REPORT_HEADER]
    for kind in synthetic.STREAMS:
        csv_out = run.target(f"synthetic_{kind}.csv")
        res = synthetic.run_synthetic(kind, run.root.split(f"synthetic.{kind}"), bits=run.cfg.bits_a)
        lines.append(res.summary_line())
        print(lines[-1])
        sigma = synthetic.stream_sigma(kind, np.arange(len(res.intervals)), len(res.intervals))
        with open(csv_out, "w") as fh:
            fh.write("t,sigma,tdq_interval,oracle_interval\n")
            for t, (sg, s, o) in enumerate(zip(sigma, res.intervals, res.oracle_s)):
                fh.write(f"{t},{sg:.9g},{s:.9g},{o:.9g}\n")
    out.write_text("\n".join(lines) + "\n")
    print(out)


COMMANDS = {
    "train-fp": cmd_train_fp,
    "trace": cmd_trace,
    "qat": cmd_qat,
    "ptq": cmd_ptq,
    "export-table": cmd_export_table,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench-synthetic": cmd_bench_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--bits-w", type=int, help="weight bit-width")
    common.add_argument("--bits-a", type=int, help="activation bit-width")
    common.add_argument("--mode", help="quantization mode (comma-separated list for eval)")
    common.add_argument("--n-steps", type=int, help="DDIM steps for sample/eval")
    common.add_argument("--from", dest="source", default="qat", help="which TDQ/static checkpoints to use: qat or ptq")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tdq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if not args.config.exists():
            raise CliError(f"missing config file: {args.config}")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise CliError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config).replace(seed=args.seed, bits_w=args.bits_w, bits_a=args.bits_a, n_steps=args.n_steps)
        log.info("resolved config (%s):\n%s", args.config, cfg.resolved())
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](Run(cfg, args.out, args.force), args)
    except (CliError, ConfigError, ValueError, OSError, calib.DivergenceError) as exc:
        print(f"tdq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
