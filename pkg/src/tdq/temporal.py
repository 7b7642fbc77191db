"""Time-conditioned quantization intervals.

A small MLP maps a frequency encoding of the diffusion step to a positive
interval. After fitting, the intervals for every step are tabulated so that
inference needs no extra compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Param, RandomStream, Tensor, as_tensor, linear, no_grad, relu, softplus
from .quant import QuantSpec, best_interval, fake_quant_ste

T_MAX = 10000.0


def encode_time(t, d: int = 64, t_max: float = T_MAX) -> np.ndarray:
    """Interleaved (sin, cos) features of ``t`` at geometric frequencies.

    Pair k uses t / t_max**e_k with e_k evenly spaced on [0, 1], so the first
    pair is (sin t, cos t) and the last is (sin t/t_max, cos t/t_max).
    Scalar t gives shape (d,); a vector of steps gives (len(t), d).
    """
    if d < 2 or d % 2:
        raise ValueError(f"encoding dimension must be even and >= 2, got {d}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("time step must be non-negative")
    half = d // 2
    expo = np.linspace(0.0, 1.0, half) if half > 1 else np.zeros(1)
    arg = t_arr[..., None] / np.power(float(t_max), expo)
    out = np.empty(arg.shape[:-1] + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out.astype(np.float32)


def softplus_inverse(s: float) -> float:
    s = float(s)
    return s + float(np.log(-np.expm1(-s)))


class GeneratorMLP:
    """d -> hidden -> hidden -> 1 with ReLU, softplus head."""

    def __init__(self, d: int = 64, hidden: int = 64, rng: RandomStream | None = None, name: str = "gen"):
        self.d = d
        self.hidden = hidden
        self.name = name
        sizes = [(hidden, d), (hidden, hidden), (1, hidden)]
        self.weights = [Param(np.zeros(shape), name=f"{name}.l{i}.w") for i, shape in enumerate(sizes)]
        self.biases = [Param(np.zeros(shape[0]), name=f"{name}.l{i}.b") for i, shape in enumerate(sizes)]
        self.he_init(rng or RandomStream(0))

    def he_init(self, rng: RandomStream) -> None:
        # Final layer starts at zero so the head outputs exactly softplus(bias).
        for i, w in enumerate(self.weights[:-1]):
            fan_in = w.shape[1]
            w.data[...] = rng.split(f"l{i}").normal(w.shape) * np.float32(np.sqrt(2.0 / fan_in))
        self.weights[-1].data[...] = 0.0
        for b in self.biases:
            b.data[...] = 0.0

    def params(self) -> list[Param]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def __call__(self, enc) -> Tensor:
        return generator_forward(self, enc)


def generator_forward(gen: GeneratorMLP, enc) -> Tensor:
    """Interval(s) for encoded step(s); shape (rows, 1), strictly positive."""
    h = as_tensor(enc)
    if h.data.ndim == 1:
        h = Tensor(h.data[None, :], dtype=h.dtype)
    if h.shape[1] != gen.d:
        raise ValueError(f"encoding has {h.shape[1]} features, generator expects {gen.d}")
    h = relu(linear(h, gen.weights[0], gen.biases[0]))
    h = relu(linear(h, gen.weights[1], gen.biases[1]))
    return softplus(linear(h, gen.weights[2], gen.biases[2]))


def init_generator(
    gen: GeneratorMLP,
    samples,
    spec: QuantSpec,
    rng: RandomStream,
    z: float = 0.0,
    n_grid: int = 256,
) -> float:
    """He-initialize ``gen`` and set its head bias so it emits the best static interval.

    ``samples`` is an array (or list of arrays) of activations drawn across
    the whole step range. Returns that interval.
    """
    if isinstance(samples, (list, tuple)):
        if not samples:
            raise ValueError("no activation samples to initialize from")
        samples = np.concatenate([np.ravel(a) for a in samples])
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ValueError("no activation samples to initialize from")
    s0 = best_interval(samples, spec, z=z, n_grid=n_grid)
    gen.he_init(rng)
    gen.biases[-1].data[...] = np.float32(softplus_inverse(s0))
    return s0


def dynamic_fake_quant(x, gen: GeneratorMLP, t, spec: QuantSpec, z=0.0, d: int | None = None, t_max: float = T_MAX) -> Tensor:
    """Fake-quantize ``x`` with the interval the generator emits for step ``t``.

    Scalar t shares one interval across the batch; a per-row t vector gives
    each row its own interval.
    """
    s = generator_forward(gen, encode_time(t, d or gen.d, t_max))
    return fake_quant_ste(x, s, z, spec)


@dataclass
class IntervalTable:
    """Pre-computed interval per (site, step) plus the static zero offsets."""

    T: int
    intervals: dict[str, np.ndarray] = field(default_factory=dict)
    zero_offsets: dict[str, float] = field(default_factory=dict)

    def lookup(self, site: str, t) -> np.ndarray:
        col = self.intervals[site]
        out = col[np.asarray(t)]
        return out.reshape(1, 1) if np.ndim(out) == 0 else out[:, None]

    @property
    def sites(self) -> list[str]:
        return list(self.intervals)


def precompute_table(gens: dict[str, GeneratorMLP], T: int, zero_offsets: dict[str, float] | None = None, t_max: float = T_MAX) -> IntervalTable:
    """Evaluate every generator at every step, one step at a time.

    Each entry goes through exactly the single-row forward used during live
    sampling, so table and live intervals are bit-identical.
    """
    table = IntervalTable(T=T, zero_offsets=dict(zero_offsets or {}))
    with no_grad():
        for site, gen in gens.items():
            col = np.empty(T, dtype=np.float32)
            for t in range(T):
                col[t] = generator_forward(gen, encode_time(t, gen.d, t_max)).data[0, 0]
            if np.any(~(col > 0)):
                raise ValueError(f"non-positive interval generated at site {site}")
            table.intervals[site] = col
    return table
