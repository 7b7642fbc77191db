"""Toy eps-prediction MLP with a named quantization site at every linear input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Param, RandomStream, Tensor, as_tensor, concat, linear, silu
from .schedule import NoiseSchedule, forward_diffuse
from .temporal import T_MAX, encode_time


class Denoiser:
    """concat(x, time_proj(enc(t))) -> depth x (linear, SiLU) -> linear.

    Sites, in topological order: ``temb`` (time projection), ``block0`` ..
    ``block{depth-1}``, ``head``. Each site names one linear layer; its
    activation quantizer acts on that layer's input.
    """

    def __init__(self, input_dim: int = 2, hidden: int = 128, depth: int = 3, embed_dim: int = 64, rng: RandomStream | None = None, t_max: float = T_MAX):
        if input_dim < 1 or hidden < 1 or depth < 0 or embed_dim < 2 or embed_dim % 2:
            raise ValueError("invalid denoiser sizes")
        self.input_dim = input_dim
        self.hidden = hidden
        self.depth = depth
        self.embed_dim = embed_dim
        self.t_max = t_max
        shapes = {"temb": (embed_dim, embed_dim)}
        fan = input_dim + embed_dim
        for i in range(depth):
            shapes[f"block{i}"] = (hidden, fan)
            fan = hidden
        shapes["head"] = (input_dim, fan)
        self.sites = list(shapes)
        self.weights = {k: Param(np.zeros(s), name=f"{k}.w") for k, s in shapes.items()}
        self.biases = {k: Param(np.zeros(s[0]), name=f"{k}.b") for k, s in shapes.items()}
        self.reset(rng or RandomStream(0))

    def reset(self, rng: RandomStream) -> None:
        for k, w in self.weights.items():
            w.data[...] = rng.split(k).normal(w.shape) * np.float32(np.sqrt(2.0 / w.shape[1]))
            self.biases[k].data[...] = 0.0

    def params(self) -> list[Param]:
        return [p for k in self.sites for p in (self.weights[k], self.biases[k])]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def has_activation(self, site: str) -> bool:
        return site != "head"

    def block(self, site: str, inp: Tensor, t=None, ctx=None, source: str = "live") -> Tensor:
        """One (quantized) linear layer plus its SiLU, if any."""
        w = self.weights[site]
        if ctx is not None:
            inp = ctx.quantize_activation(site, inp, t, source)
            w = ctx.quantize_weight(site, w)
        out = linear(inp, w, self.biases[site])
        return silu(out) if self.has_activation(site) else out

    def time_features(self, t, batch: int) -> np.ndarray:
        enc = encode_time(t, self.embed_dim, self.t_max)
        if enc.ndim == 1:
            enc = np.broadcast_to(enc, (batch, self.embed_dim))
        return enc

    def __call__(self, x_t, t, ctx=None, source: str = "live", taps: dict | None = None) -> Tensor:
        x = as_tensor(x_t)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (B, {self.input_dim}), got {x.shape}")
        if ctx is not None:
            ctx.check_sites(self.sites)

        def run(site, inp):
            if taps is not None:
                taps[site] = inp.data
            return self.block(site, inp, t, ctx, source)

        h = run("temb", Tensor(self.time_features(t, x.shape[0])))
        h = concat([x, h], axis=1)
        for i in range(self.depth):
            h = run(f"block{i}", h)
        return run("head", h)


def build_denoiser(input_dim: int = 2, hidden: int = 128, depth: int = 3, embed_dim: int = 64, rng: RandomStream | None = None) -> Denoiser:
    return Denoiser(input_dim, hidden, depth, embed_dim, rng)


def predict_eps(model: Denoiser, x_t, t, quant_ctx=None, source: str = "live", taps: dict | None = None) -> Tensor:
    return model(x_t, t, quant_ctx, source=source, taps=taps)


@dataclass
class RunningStats:
    """Count, mean, M2, min and max with Chan's parallel merge."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    min: float = np.inf
    max: float = -np.inf

    @classmethod
    def of(cls, a: np.ndarray) -> RunningStats:
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size == 0:
            return cls()
        mu = float(a.mean())
        return cls(count=a.size, mean=mu, m2=float(((a - mu) ** 2).sum()), min=float(a.min()), max=float(a.max()))

    def merge(self, other: RunningStats) -> RunningStats:
        if other.count == 0:
            return RunningStats(self.count, self.mean, self.m2, self.min, self.max)
        if self.count == 0:
            return RunningStats(other.count, other.mean, other.m2, other.min, other.max)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return RunningStats(n, mean, m2, min(self.min, other.min), max(self.max, other.max))

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else 0.0


@dataclass
class ActivationTrace:
    """Per-(site, t) activation statistics, optionally with the raw tensors."""

    stats: dict[tuple[str, int], RunningStats] = field(default_factory=dict)
    raw: list[tuple[str, int, np.ndarray]] | None = None

    def add(self, site: str, t: int, a: np.ndarray) -> None:
        key = (site, int(t))
        self.stats[key] = self.stats.get(key, RunningStats()).merge(RunningStats.of(a))
        if self.raw is not None:
            self.raw.append((site, int(t), np.asarray(a, dtype=np.float32)))

    def merge(self, other: ActivationTrace) -> ActivationTrace:
        out = ActivationTrace(dict(self.stats))
        for key, st in other.stats.items():
            out.stats[key] = out.stats.get(key, RunningStats()).merge(st)
        return out

    @property
    def sites(self) -> list[str]:
        return list(dict.fromkeys(k[0] for k in self.stats))

    def timesteps(self, site: str) -> list[int]:
        return sorted(t for s, t in self.stats if s == site)

    def range_series(self, site: str) -> tuple[np.ndarray, np.ndarray]:
        ts = self.timesteps(site)
        return np.array(ts), np.array([self.stats[(site, t)].max - self.stats[(site, t)].min for t in ts])


def record_trace(
    model: Denoiser,
    dataset: np.ndarray,
    sched: NoiseSchedule,
    timesteps,
    rng: RandomStream,
    batch_size: int = 256,
    ctx=None,
    keep_raw: bool = False,
) -> ActivationTrace:
    """Forward-diffuse a data batch to each requested step and collect site statistics."""
    timesteps = list(timesteps)
    if not timesteps:
        raise ValueError("no time steps requested")
    dataset = np.asarray(dataset, dtype=np.float32)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    trace = ActivationTrace(raw=[] if keep_raw else None)
    for t in timesteps:
        sub = rng.split(f"t{int(t)}")
        idx = sub.integers(0, len(dataset), batch_size)
        x_t = forward_diffuse(dataset[idx], int(t), sub.normal((batch_size, dataset.shape[1])), sched)
        taps: dict[str, np.ndarray] = {}
        model(x_t, int(t), ctx, taps=taps)
        for site in model.sites:
            trace.add(site, int(t), taps[site])
    return trace
