"""Linear fake quantization, STE gradients and the non-temporal baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import Tensor, as_tensor, custom_op

# Smallest interval ever produced; also the positivity floor during training.
S_FLOOR = float(np.finfo(np.float32).eps)


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width, symmetry and granularity of one quantizer.

    Symmetric: z = 0 and p = -n = 2^(b-1) - 1. Asymmetric: n = 0, p = 2^b - 1.
    ``channel_axis`` None means per-tensor.
    """

    bits: int
    symmetric: bool = False
    channel_axis: int | None = None

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")

    @property
    def n(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def p(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    @property
    def levels(self) -> int:
        return self.p - self.n + 1


@dataclass
class QuantState:
    """Interval ``s`` and zero offset ``z``; scalars or per-channel arrays."""

    s: float | np.ndarray
    z: float | np.ndarray = 0.0

    def validate(self, spec: QuantSpec) -> None:
        if np.any(~(np.asarray(self.s) > 0)):
            raise ValueError("quantization interval must be positive")
        if spec.symmetric and np.any(np.asarray(self.z) != 0):
            raise ValueError("symmetric quantization requires z = 0")


def quantize(x: np.ndarray, spec: QuantSpec, state: QuantState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x_bar, x_hat)``: integer indices in [n, p] and dequantized values."""
    state.validate(spec)
    x = np.asarray(x, dtype=np.float32)
    xhat, xbar = kernels.fake_quant_fwd(x, state.s, state.z, spec.n, spec.p)
    return xbar.astype(np.int64), xhat


def fake_quant_ste(x: Tensor, s, z, spec: QuantSpec) -> Tensor:
    """Differentiable fake quantization.

    The x-gradient passes straight through inside the clip range. The
    s-gradient is the LSQ one: round(x/s) - x/s inside, n - z or p - z when
    saturated. z only receives gradient (-s) from saturated elements.
    """
    x = as_tensor(x)
    s = as_tensor(s, dtype=x.dtype)
    z = as_tensor(0.0 if z is None else z, dtype=x.dtype)
    if np.any(~(s.data > 0)):
        raise ValueError("quantization interval must be positive")
    if spec.symmetric and np.any(z.data != 0):
        raise ValueError("symmetric quantization requires z = 0")
    n, p = spec.n, spec.p
    xhat, _ = kernels.fake_quant_fwd(x.data, s.data, z.data, n, p)

    def backward(g):
        dx, ds, dz = kernels.fake_quant_bwd(x.data, s.data, z.data, g, n, p)
        return (
            dx,
            _reduce_to(ds, s.shape).astype(s.dtype),
            _reduce_to(dz, z.shape).astype(z.dtype),
        )

    return custom_op(xhat, (x, s, z), backward)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def lsq_grad_scale(n_elements: int, spec: QuantSpec) -> float:
    return 1.0 / float(np.sqrt(n_elements * spec.p))


def _degenerate_state(c: float, spec: QuantSpec) -> QuantState:
    # Pick s = |c| / K with K a power of two so that c is a level exactly.
    if spec.symmetric:
        room = spec.p
        z = 0.0
    else:
        z = float(spec.n + (spec.p - spec.n) // 2)
        room = min(spec.p - z, z - spec.n)
    k = 2 ** int(np.floor(np.log2(max(room, 1))))
    s = abs(float(np.float32(c))) / k
    if s < S_FLOOR:
        s = S_FLOOR
    return QuantState(s=s, z=z)


def minmax_calibrate(x: np.ndarray, spec: QuantSpec) -> QuantState:
    """Per-tensor range from the tensor's own min and max (widened to contain 0)."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    lo, hi = float(x.min()), float(x.max())
    if spec.symmetric:
        amax = max(abs(lo), abs(hi))
        if lo == hi:
            return _degenerate_state(lo, spec)
        return QuantState(s=max(amax / spec.p, S_FLOOR), z=0.0)
    if lo == hi:
        return _degenerate_state(lo, spec)
    # widen to include 0 so z stays in [n, p] without clamping the grid away from the data
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    s = max((hi - lo) / (spec.p - spec.n), S_FLOOR)
    z = float(np.clip(kernels.round_half_away(np.float64(-lo / s)) + spec.n, spec.n, spec.p))
    return QuantState(s=s, z=z)


def perchannel_weight_calibrate(w: np.ndarray, spec: QuantSpec) -> list[QuantState]:
    """Independent min-max calibration of every output row of ``w``."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] < 1:
        raise ValueError(f"expected a (out, in) weight, got shape {w.shape}")
    return [minmax_calibrate(row, spec) for row in w]


def stack_states(states: list[QuantState]) -> QuantState:
    """Per-channel states as column arrays that broadcast against (out, in)."""
    s = np.array([float(st.s) for st in states], dtype=np.float64)[:, None]
    z = np.array([float(st.z) for st in states], dtype=np.float64)[:, None]
    return QuantState(s=s, z=z)


def input_dynamic_interval(x: np.ndarray, spec: QuantSpec) -> QuantState:
    """Interval from this very tensor: s = max|x| / p, z = 0."""
    if not spec.symmetric:
        raise ValueError("input-dynamic baseline uses symmetric quantization")
    amax = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return QuantState(s=max(amax / spec.p, S_FLOOR), z=0.0)


def quant_error_grid(x: np.ndarray, candidates: np.ndarray, spec: QuantSpec, z: float = 0.0) -> np.ndarray:
    """Mean squared fake-quant error of ``x`` at each candidate interval."""
    x = np.asarray(x)
    return kernels.quant_sse_grid(x, candidates, z, spec.n, spec.p) / max(x.size, 1)


def centered_zero(lo: float, hi: float, spec: QuantSpec) -> float:
    """Zero offset placing real 0 at the fraction of [lo, hi] below it."""
    if spec.symmetric:
        return 0.0
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    frac = 0.5 if hi == lo else -lo / (hi - lo)
    return float(np.clip(kernels.round_half_away(np.float64(spec.n + frac * (spec.p - spec.n))), spec.n, spec.p))


def best_interval(
    x: np.ndarray,
    spec: QuantSpec,
    z: float = 0.0,
    n_grid: int = 256,
    span: tuple[float, float] = (1e-4, 1e2),
    refine: int = 64,
) -> float:
    """MSE-optimal interval: log grid over ``span`` times std(x), then a local refinement.

    The grid's lower end is extended to the min-max interval when that is
    smaller, so high bit-widths still reach their optimum.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    scale = float(x.std()) or float(np.abs(x).max()) or 1.0
    full = (float(x.max()) - float(x.min())) / (spec.p - spec.n) if x.size else 0.0
    lo = min(span[0] * scale, full) if full > 0 else span[0] * scale
    grid = np.geomspace(lo, span[1] * scale, n_grid)
    err = quant_error_grid(x, grid, spec, z)
    i = int(np.argmin(err))
    if refine:
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, n_grid - 1)]
        fine = np.linspace(lo, hi, refine)
        ferr = quant_error_grid(x, fine, spec, z)
        j = int(np.argmin(ferr))
        if ferr[j] <= err[i]:
            return float(fine[j])
    return float(grid[i])
