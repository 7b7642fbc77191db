"""Noise schedule, forward noising, the eps-prediction loss and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RandomStream, Tensor, as_tensor, mul, no_grad, square, sub, tsum

QUANT_MODES = ("fp", "static", "tdq-live", "tdq-table")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"time step out of range [0, {self.T}): {t.min()}..{t.max()}")


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (alpha_bars[-1] > 0 and np.all(np.diff(alpha_bars) < 0)):
        raise ValueError("alpha_bar underflows to 0; schedule destroys all signal")
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _col(v: np.ndarray, t) -> np.ndarray:
    """Schedule entry for scalar t, or a column for a per-row t vector."""
    out = v[np.asarray(t)]
    return out if np.ndim(out) == 0 else out[:, None]


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_t(t)
    ab = _col(sched.alpha_bars, t)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def simple_loss(eps_true, eps_pred: Tensor) -> Tensor:
    """Batch mean of the squared error norm."""
    eps_pred = as_tensor(eps_pred)
    if np.shape(eps_true) != eps_pred.shape:
        raise ValueError(f"shape mismatch: {np.shape(eps_true)} vs {eps_pred.shape}")
    batch = eps_pred.shape[0] if eps_pred.data.ndim else 1
    return mul(tsum(square(sub(eps_pred, as_tensor(eps_true, dtype=eps_pred.dtype)))), 1.0 / batch)


def ddpm_posterior_mean(x_t: np.ndarray, eps_pred: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    sched.check_t(t)
    beta = _col(sched.betas, t)
    ab = _col(sched.alpha_bars, t)
    a = _col(sched.alphas, t)
    return ((x_t - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)).astype(np.float32)


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Descending uniform-stride subsequence of range(T) that ends at 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = np.floor(np.arange(n_steps) * (T / n_steps)).astype(np.int64)
    return ts[::-1]


def ddim_sample(
    model,
    n_steps: int,
    sched: NoiseSchedule,
    rng: RandomStream,
    quant_mode: str = "fp",
    ctx=None,
    n_samples: int = 512,
    x_T: np.ndarray | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
    clip_x0: float | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling.

    ``quant_mode`` picks the execution: ``fp`` ignores ``ctx``; ``static``
    requires a context without temporal sites; ``tdq-live`` evaluates the
    interval generators; ``tdq-table`` reads the pre-computed table.
    ``model(x, t, ctx, source=...)`` returns the eps estimate; ``on_step(t, x_t)``
    sees the state fed to the model at each step. ``clip_x0`` optionally
    clamps the predicted clean sample to ``[-clip_x0, clip_x0]`` before the
    update (off by default).
    """
    if quant_mode not in QUANT_MODES:
        raise ValueError(f"unknown quant_mode {quant_mode!r}; expected one of {QUANT_MODES}")
    ts = ddim_timesteps(sched.T, n_steps)
    if quant_mode == "fp":
        ctx, source = None, "live"
    else:
        if ctx is None:
            raise ValueError(f"quant_mode {quant_mode!r} needs a quantization context")
        if quant_mode == "static" and ctx.has_temporal():
            raise ValueError("static mode given a context with temporal sites")
        source = "table" if quant_mode == "tdq-table" else "live"
        if source == "table" and ctx.table is None:
            raise ValueError("tdq-table mode needs a pre-computed interval table")
    x = rng.normal((n_samples, model.input_dim)) if x_T is None else np.array(x_T, dtype=np.float32)
    for i, t in enumerate(ts):
        t = int(t)
        if on_step is not None:
            on_step(t, x)
        with no_grad():
            out = model(x, t, ctx, source=source)
        eps = np.asarray(getattr(out, "data", out))
        ab = sched.alpha_bars[t]
        ab_prev = sched.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip_x0 is not None:
            x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
        x = (np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps).astype(np.float32)
    return x
