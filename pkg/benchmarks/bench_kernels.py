"""Time the numba kernels against their numpy fallbacks on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-``repeat`` wall time of each
backend and the speedup. Outputs are also checked for equality so a fast
but wrong kernel cannot pass unnoticed.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tdq.kernels import nb_impl, np_impl


def cases(gen: np.random.Generator) -> dict:
    n = 1 << 20
    x = gen.normal(size=n).astype(np.float32)
    s = np.full(n, 0.3)
    z = np.full(n, 3.0)
    g = gen.normal(size=n)
    xs = gen.normal(size=1 << 16)
    grid = np.geomspace(1e-3, 1.0, 256)
    a, b = gen.normal(size=(512, 2)), gen.normal(size=(512, 2))
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    return {
        "fake_quant_fwd (1M)": ("fake_quant_fwd", (x, s, z, 0.0, 15.0)),
        "fake_quant_bwd (1M)": ("fake_quant_bwd", (x, s, z, g, 0.0, 15.0)),
        "quant_sse_grid (64k x 256)": ("quant_sse_grid", (xs, grid, 0.0, -7.0, 7.0)),
        "assignment (512 x 512)": ("assignment", (cost,)),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    if np.asarray(a).dtype.kind == "i":
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-12, atol=0)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if nb_impl is None:
        raise SystemExit("numba backend unavailable (TDQ_DISABLE_NUMBA set or numba missing)")
    print(f"{'kernel':<28} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  equal")
    for label, (name, inputs) in cases(np.random.default_rng(0)).items():
        fnp, fnb = getattr(np_impl, name), getattr(nb_impl, name)
        ok = same(fnp(*inputs), fnb(*inputs))  # also warms up the jit
        t_np = min(timeit.repeat(lambda: fnp(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fnb(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<28} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x  {ok}")


if __name__ == "__main__":
    main()
