"""FP training, quantization-aware training and blockwise PTQ reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .context import ACT_MODES, ActQuant, QuantContext, static_act, weight_quant
from .denoiser import Denoiser
from .numerics import Adam, Param, RandomStream, Tensor, backward, mse, no_grad
from .quant import QuantSpec, best_interval, centered_zero, minmax_calibrate, perchannel_weight_calibrate, stack_states
from .schedule import NoiseSchedule, ddim_sample, forward_diffuse, simple_loss
from .temporal import GeneratorMLP, init_generator

log = logging.getLogger(__name__)

__all__ = [
    "QuantContext",
    "CalibrationSet",
    "train_fp",
    "qat_train",
    "sample_calibration",
    "ptq_reconstruct",
    "build_context",
    "init_samples",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class CalibrationSet:
    x: np.ndarray
    t: np.ndarray
    seed: int = 0
    source: str = ""

    def __len__(self) -> int:
        return len(self.t)


def _train_loop(model: Denoiser, ctx, data, sched, steps, opt: Adam, rng: RandomStream, batch_size: int) -> list[float]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    data = np.asarray(data, dtype=np.float32)
    stream = rng.split("train")
    losses = []
    for step in range(steps):
        idx = stream.integers(0, len(data), batch_size)
        t = stream.integers(0, sched.T, batch_size)
        eps = stream.normal((batch_size, data.shape[1]))
        x_t = forward_diffuse(data[idx], t, eps, sched)
        opt.zero_grad()
        loss = simple_loss(eps, model(x_t, t, ctx))
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        backward(loss)
        opt.step()
        hits = ctx.clamp_intervals() if ctx is not None else 0
        if hits:
            level = logging.WARNING if ctx.floor_hits == hits else logging.DEBUG
            log.log(level, "interval clamped to the positivity floor at step %d (total %d)", step, ctx.floor_hits)
        losses.append(value)
    if ctx is not None and ctx.floor_hits:
        log.warning("%d interval clamps to the positivity floor during training", ctx.floor_hits)
    return losses


def train_fp(model: Denoiser, data, sched: NoiseSchedule, steps: int, lr: float, rng: RandomStream, batch_size: int = 256) -> list[float]:
    """Minimize the eps-prediction loss in place; returns the per-step losses."""
    opt = Adam([(model.params(), lr)])
    return _train_loop(model, None, data, sched, steps, opt, rng, batch_size)


def qat_train(
    model: Denoiser,
    ctx: QuantContext,
    data,
    sched: NoiseSchedule,
    steps: int,
    lr: float,
    rng: RandomStream,
    lr_gen: float = 1e-3,
    lr_quant: float | None = None,
    batch_size: int = 256,
) -> list[float]:
    """Jointly fine-tune weights and quantizer parameters through the STE.

    Generators step with ``lr_gen``; static intervals (activation and
    weight) and zero offsets with ``lr_quant``, which defaults to ``lr``.
    """
    lr_quant = lr if lr_quant is None else lr_quant
    groups = [(model.params(), lr)]
    qparams = ctx.static_interval_params() + ctx.zero_params()
    if qparams:
        groups.append((qparams, lr_quant))
    if ctx.generator_params():
        groups.append((ctx.generator_params(), lr_gen))
    opt = Adam(groups)
    return _train_loop(model, ctx, data, sched, steps, opt, rng, batch_size)


def eval_loss(model: Denoiser, data, sched: NoiseSchedule, rng: RandomStream, ctx=None, n: int = 4096) -> float:
    data = np.asarray(data, dtype=np.float32)
    idx = rng.integers(0, len(data), n)
    t = rng.integers(0, sched.T, n)
    eps = rng.normal((n, data.shape[1]))
    with no_grad():
        return float(simple_loss(eps, model(forward_diffuse(data[idx], t, eps, sched), t, ctx)).data)


def init_samples(model: Denoiser, data, sched: NoiseSchedule, rng: RandomStream, n: int = 1000) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """FP activations at every site for ``n`` samples spread over all steps."""
    data = np.asarray(data, dtype=np.float32)
    t = (np.arange(n) * sched.T // n).astype(np.int64)
    idx = rng.integers(0, len(data), n)
    x_t = forward_diffuse(data[idx], t, rng.normal((n, data.shape[1])), sched)
    taps: dict[str, np.ndarray] = {}
    with no_grad():
        model(x_t, t, taps=taps)
    return taps, t


def build_context(
    model: Denoiser,
    act_mode: str,
    bits_w: int,
    bits_a: int,
    act_samples: dict[str, np.ndarray],
    rng: RandomStream,
    weight_style: str = "lsq",
    gen_hidden: int = 64,
) -> QuantContext:
    """Quantizers for every site, initialized from sample activations.

    Activations are per-tensor asymmetric (symmetric for ``input-dynamic``).
    ``weight_style`` ``lsq``: per-channel symmetric, learnable intervals from
    min/max; ``minmax``: per-channel asymmetric, fixed; ``none``: FP weights.
    """
    if act_mode not in ACT_MODES:
        raise ValueError(f"unknown activation mode {act_mode!r}")
    act: dict[str, ActQuant] = {}
    weight = {}
    for site in model.sites:
        if act_mode == "input-dynamic":
            act[site] = ActQuant("input-dynamic", QuantSpec(bits_a, symmetric=True))
        elif act_mode == "fp":
            act[site] = ActQuant("fp", QuantSpec(bits_a))
        else:
            spec = QuantSpec(bits_a, symmetric=False)
            a = np.asarray(act_samples[site])
            if act_mode == "minmax":
                st = minmax_calibrate(a, spec)
                act[site] = static_act(spec, float(st.s), float(st.z), mode="minmax")
            else:
                z = centered_zero(float(a.min()), float(a.max()), spec)
                if act_mode == "static-lsq":
                    act[site] = static_act(spec, best_interval(a, spec, z), z)
                else:
                    gen = GeneratorMLP(64, gen_hidden, name=f"gen.{site}")
                    init_generator(gen, a, spec, rng.split(f"gen.{site}"), z=z)
                    act[site] = ActQuant("tdq", spec, z=Param(np.float32(z)), gen=gen)
        w = model.weights[site].data
        if weight_style == "lsq":
            wspec = QuantSpec(bits_w, symmetric=True, channel_axis=0)
            weight[site] = weight_quant(wspec, np.maximum(np.abs(w).max(axis=1) / wspec.p, 1e-8), learnable=True)
        elif weight_style == "minmax":
            wspec = QuantSpec(bits_w, symmetric=False, channel_axis=0)
            st = stack_states(perchannel_weight_calibrate(w, wspec))
            weight[site] = weight_quant(wspec, st.s, st.z)
        elif weight_style == "none":
            weight[site] = None
        else:
            raise ValueError(f"unknown weight style {weight_style!r}")
    return QuantContext(act, weight, t_max=model.t_max)


def sample_calibration(
    model_fp: Denoiser,
    sched: NoiseSchedule,
    n_images: int,
    t_per_image: int,
    rng: RandomStream,
    source: str = "",
) -> CalibrationSet:
    """Record model inputs at ``t_per_image`` distinct random steps of FP DDIM trajectories."""
    if t_per_image > sched.T or t_per_image < 1:
        raise ValueError(f"t_per_image must be in [1, {sched.T}], got {t_per_image}")
    pick = rng.split("steps")
    chosen = np.zeros((n_images, sched.T), dtype=bool)
    for i in range(n_images):
        chosen[i, pick.choice(sched.T, t_per_image, replace=False)] = True
    xs, ts = [], []

    def record(t, x):
        rows = chosen[:, t]
        if rows.any():
            xs.append(x[rows].copy())
            ts.append(np.full(int(rows.sum()), t, dtype=np.int64))

    ddim_sample(model_fp, sched.T, sched, rng.split("chains"), n_samples=n_images, on_step=record)
    return CalibrationSet(np.concatenate(xs), np.concatenate(ts), seed=rng.seed, source=source)


@dataclass
class BlockFit:
    site: str
    entry_loss: float
    exit_loss: float
    iters: int
    stopped_early: bool = False


@dataclass
class PTQReport:
    blocks: list[BlockFit] = field(default_factory=list)


def site_quant_params(ctx: QuantContext, site: str) -> list[Param]:
    aq = ctx.act[site]
    if aq.mode == "tdq":
        return aq.gen.params() + ([aq.z] if isinstance(aq.z, Param) else [])
    if aq.mode == "static-lsq":
        return [aq.s] + ([aq.z] if isinstance(aq.z, Param) else [])
    return []


def fit_block(loss_fn, params: list[Param], n: int, iters: int, lr: float, rng: RandomStream, batch_size: int = 256, eval_every: int = 50, patience: int = 8, after_step=None):
    """Adam on ``loss_fn(idx)`` over minibatches of ``range(n)``; keeps the best full-set state.

    Returns ``(entry_loss, exit_loss, iters_run, stopped_early)``; exit <= entry.
    """
    full = np.arange(n)

    def full_loss():
        with no_grad():
            return float(loss_fn(full).data)

    entry = best = full_loss()
    snapshot = [p.data.copy() for p in params]
    if iters <= 0 or not params:
        return entry, entry, 0, False
    opt = Adam([(params, lr)])
    stale = 0
    it = 0
    stopped = False
    for it in range(1, iters + 1):
        idx = rng.integers(0, n, min(batch_size, n))
        opt.zero_grad()
        loss = loss_fn(idx)
        backward(loss)
        opt.step()
        if after_step is not None:
            after_step()
        if it % eval_every == 0 or it == iters:
            cur = full_loss()
            if cur < best:
                best, stale = cur, 0
                snapshot = [p.data.copy() for p in params]
            else:
                stale += 1
                if stale >= patience:
                    stopped = True
                    break
    for p, v in zip(params, snapshot):
        p.data[...] = v
    return entry, best, it, stopped


def ptq_reconstruct(
    model_fp: Denoiser,
    ctx: QuantContext,
    calset: CalibrationSet,
    iters: int,
    lr: float,
    rng: RandomStream | None = None,
    batch_size: int = 256,
) -> PTQReport:
    """Fit each block's activation quantizer to reproduce its FP output.

    Blocks are visited in topological order; block k sees the quantized
    outputs of blocks < k as input. Model weights are never touched.
    """
    rng = rng or RandomStream(0)
    x, t = calset.x, calset.t
    fp_taps: dict[str, np.ndarray] = {}
    with no_grad():
        model_fp(x, t, taps=fp_taps)
    report = PTQReport()
    ctx.active = set()
    try:
        for k, site in enumerate(model_fp.sites):
            q_taps: dict[str, np.ndarray] = {}
            with no_grad():
                model_fp(x, t, ctx, taps=q_taps)
                target = model_fp.block(site, Tensor(fp_taps[site])).data
            q_in = q_taps[site]
            ctx.active.add(site)

            def loss_fn(idx, site=site, q_in=q_in, target=target):
                out = model_fp.block(site, Tensor(q_in[idx]), t[idx], ctx)
                return mse(out, target[idx])

            params = site_quant_params(ctx, site)
            entry, exit_, n_it, early = fit_block(
                loss_fn, params, len(t), iters, lr, rng.split(site), batch_size, after_step=ctx.clamp_intervals
            )
            if early:
                log.info("block %s stopped early after %d iterations", site, n_it)
            report.blocks.append(BlockFit(site, entry, exit_, n_it, early))
    finally:
        ctx.active = None
        for p in model_fp.params():
            p.grad[...] = 0
    return report
