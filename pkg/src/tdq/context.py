"""Per-site quantization configuration for the denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Param, Tensor, as_tensor, grad_scale
from .quant import (
    S_FLOOR,
    QuantSpec,
    fake_quant_ste,
    input_dynamic_interval,
    lsq_grad_scale,
)
from .temporal import T_MAX, GeneratorMLP, IntervalTable, encode_time, generator_forward

ACT_MODES = ("fp", "static-lsq", "minmax", "input-dynamic", "tdq")


@dataclass
class ActQuant:
    mode: str
    spec: QuantSpec
    s: Param | None = None
    z: Param | None = None
    gen: GeneratorMLP | None = None

    def __post_init__(self):
        if self.mode not in ACT_MODES:
            raise ValueError(f"unknown activation mode {self.mode!r}")
        if self.mode == "input-dynamic" and not self.spec.symmetric:
            raise ValueError("input-dynamic mode needs a symmetric spec")
        if self.mode in ("static-lsq", "minmax") and self.s is None:
            raise ValueError(f"{self.mode} site needs an interval")
        if self.mode == "tdq" and self.gen is None:
            raise ValueError("tdq site needs a generator")

    @property
    def zero(self) -> float:
        return 0.0 if self.z is None else float(self.z.data)


@dataclass
class WeightQuant:
    """Per-output-channel weight quantizer; ``s`` and ``z`` are (out, 1)."""

    spec: QuantSpec
    s: Tensor
    z: Tensor


class QuantContext:
    """Activation and weight quantizers for every denoiser site.

    ``active`` limits quantization to a subset of sites (the rest run in full
    precision); blockwise reconstruction uses it to quantize a prefix.
    """

    def __init__(self, act: dict[str, ActQuant], weight: dict[str, WeightQuant | None], table: IntervalTable | None = None, t_max: float = T_MAX):
        if set(act) != set(weight):
            raise ValueError("activation and weight quantizers must cover the same sites")
        self.act = act
        self.weight = weight
        self.table = table
        self.t_max = t_max
        self.active: set[str] | None = None
        self.floor_hits = 0
        self.grad_scaling = True

    @property
    def sites(self) -> list[str]:
        return list(self.act)

    def has_temporal(self) -> bool:
        return any(a.mode == "tdq" for a in self.act.values())

    def is_active(self, site: str) -> bool:
        return self.active is None or site in self.active

    def check_sites(self, registry) -> None:
        unknown = set(self.act) - set(registry)
        if unknown:
            raise ValueError(f"unknown quantization site(s): {sorted(unknown)}")
        missing = set(registry) - set(self.act)
        if missing:
            raise ValueError(f"sites without a quantizer: {sorted(missing)}")

    def interval(self, site: str, t, source: str = "live", x: Tensor | None = None) -> Tensor:
        """Activation interval for ``site`` at step(s) ``t`` as a broadcastable tensor."""
        aq = self.act[site]
        if aq.mode == "tdq":
            if source == "table":
                if self.table is None:
                    raise ValueError("no interval table loaded")
                return Tensor(self.table.lookup(site, t))
            return generator_forward(aq.gen, encode_time(t, aq.gen.d, self.t_max))
        if aq.mode == "input-dynamic":
            return Tensor(np.float32(input_dynamic_interval(x.data, aq.spec).s))
        return aq.s

    def quantize_activation(self, site: str, x: Tensor, t, source: str = "live") -> Tensor:
        aq = self.act[site]
        if aq.mode == "fp" or not self.is_active(site):
            return x
        s = self.interval(site, t, source, x)
        if self.grad_scaling and s.requires_grad:
            s = grad_scale(s, lsq_grad_scale(x.shape[-1], aq.spec))
        return fake_quant_ste(x, s, aq.z, aq.spec)

    def quantize_weight(self, site: str, w: Tensor) -> Tensor:
        wq = self.weight[site]
        if wq is None or not self.is_active(site):
            return w
        s = wq.s
        if self.grad_scaling and s.requires_grad:
            s = grad_scale(s, lsq_grad_scale(w.shape[1], wq.spec))
        return fake_quant_ste(w, s, wq.z, wq.spec)

    def static_interval_params(self) -> list[Param]:
        """Learnable static-LSQ activation intervals plus learnable weight intervals."""
        out = [a.s for a in self.act.values() if a.mode == "static-lsq"]
        out += [w.s for w in self.weight.values() if w is not None and isinstance(w.s, Param)]
        return out

    def zero_params(self) -> list[Param]:
        return [a.z for a in self.act.values() if isinstance(a.z, Param) and a.mode in ("static-lsq", "tdq")]

    def generator_params(self) -> list[Param]:
        return [p for a in self.act.values() if a.mode == "tdq" for p in a.gen.params()]

    def generators(self) -> dict[str, GeneratorMLP]:
        return {site: a.gen for site, a in self.act.items() if a.mode == "tdq"}

    def clamp_intervals(self) -> int:
        """Enforce the positivity floor on learnable static intervals; returns hits."""
        hits = 0
        for s in self.static_interval_params():
            low = s.data < S_FLOOR
            if np.any(low):
                hits += int(low.sum())
                s.data[low] = S_FLOOR
        for a in self.act.values():
            if a.z is not None and isinstance(a.z, Param):
                np.clip(a.z.data, a.spec.n, a.spec.p, out=a.z.data)
        self.floor_hits += hits
        return hits

    def zero_offsets(self) -> dict[str, float]:
        return {site: a.zero for site, a in self.act.items() if a.mode == "tdq"}


def static_act(spec: QuantSpec, s: float, z: float = 0.0, mode: str = "static-lsq") -> ActQuant:
    zp = None if spec.symmetric else Param(np.float32(z))
    return ActQuant(mode=mode, spec=spec, s=Param(np.float32(s)), z=zp)


def weight_quant(spec: QuantSpec, s: np.ndarray, z: np.ndarray | None = None, learnable: bool = False) -> WeightQuant:
    s = np.asarray(s, dtype=np.float32).reshape(-1, 1)
    z = np.zeros_like(s) if z is None else np.asarray(z, dtype=np.float32).reshape(-1, 1)
    return WeightQuant(spec=spec, s=Param(s) if learnable else Tensor(s), z=as_tensor(z))
