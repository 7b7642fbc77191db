"""Line-oriented ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_modes: int
    data_radius: float
    data_std: float
    n_data: int
    # model
    hidden: int
    depth: int
    embed_dim: int
    # schedule
    T: int
    beta_start: float
    beta_end: float
    # fp training
    fp_steps: int
    fp_lr: float
    batch_size: int
    # quantization
    bits_w: int
    bits_a: int
    gen_hidden: int
    n_init: int
    # qat
    qat_steps: int
    qat_lr: float
    qat_lr_quant: float
    qat_lr_gen: float
    # ptq
    calib_images: int
    calib_t_per_image: int
    ptq_iters: int
    ptq_lr: float
    # trace / sampling / eval
    trace_samples: int
    trace_stride: int
    n_samples: int
    n_steps: int
    clip_x0: float
    seed: int

    def resolved(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _convert(name: str, typ, raw: str):
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Every key is required."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _convert(key, types[key], raw)
    missing = [k for k in types if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing config key(s): {', '.join(missing)}")
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
