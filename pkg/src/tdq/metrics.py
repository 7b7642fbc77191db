"""Quantization error, sample quality and figure-data export."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import kernels
from .numerics import Tensor, no_grad


def quant_mse(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def sqnr_db(x, x_hat) -> float:
    """10 log10(signal power / MSE); inf for a perfect reconstruction."""
    err = quant_mse(x, x_hat)
    power = float(np.mean(np.asarray(x, dtype=np.float64) ** 2))
    if err == 0:
        return float("inf")
    return 10.0 * np.log10(power / err)


def wasserstein2_pointsets(a, b) -> float:
    """Exact 2-Wasserstein distance between two equal-size point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if len(a) > 2048:
        raise ValueError("at most 2048 points per set")
    if len(a) == 0:
        return 0.0
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    cols = kernels.assignment(cost)
    return float(np.sqrt(cost[np.arange(len(a)), cols].mean()))


def spearman(x, y) -> float:
    """Spearman rank correlation; 0 when either series is constant."""
    if np.ptp(np.asarray(x)) == 0 or np.ptp(np.asarray(y)) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def export_figure_data(trace, table, path) -> list[str]:
    """One CSV per site with columns ``t,act_min,act_max,interval``."""
    if not trace.stats:
        raise ValueError("empty trace")
    missing = set(trace.sites) - set(table.sites)
    if missing:
        raise ValueError(f"sites missing from the interval table: {sorted(missing)}")
    os.makedirs(path, exist_ok=True)
    written = []
    for site in trace.sites:
        fname = os.path.join(path, f"figure_{site}.csv")
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "act_min", "act_max", "interval"])
            for t in trace.timesteps(site):
                st = trace.stats[(site, t)]
                w.writerow([t, repr(st.min), repr(st.max), f"{float(table.intervals[site][t]):.9g}"])
        written.append(fname)
    return written


def read_figure_data(fname) -> dict[str, np.ndarray]:
    with open(fname, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "t": np.array([int(r["t"]) for r in rows]),
        "act_min": np.array([float(r["act_min"]) for r in rows]),
        "act_max": np.array([float(r["act_max"]) for r in rows]),
        "interval": np.array([np.float32(r["interval"]) for r in rows]),
    }


def interval_range_correlation(trace, table) -> dict[str, float]:
    """Spearman rho between the tabled interval and the activation range, per site."""
    out = {}
    for site in trace.sites:
        ts, rng = trace.range_series(site)
        out[site] = spearman(table.intervals[site][ts], rng)
    return out


@dataclass
class EvalReport:
    """Per-site, per-step quantization error plus a sample-quality score."""

    mode: str
    bits_w: int
    bits_a: int
    seed: int
    n_steps: int
    w2: float = float("nan")
    site_mse: dict[tuple[str, int], float] = field(default_factory=dict)
    site_sqnr: dict[tuple[str, int], float] = field(default_factory=dict)

    def summary_line(self) -> str:
        mses = list(self.site_mse.values())
        finite = [v for v in self.site_sqnr.values() if np.isfinite(v)]
        fields = {
            "mode": self.mode,
            "bits_w": self.bits_w,
            "bits_a": self.bits_a,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "w2": f"{self.w2:.6g}",
            "mean_mse": f"{np.mean(mses):.6g}" if mses else "nan",
            "mean_sqnr_db": f"{np.mean(finite):.6g}" if finite else "nan",
        }
        return " ".join(f"{k}={v}" for k, v in fields.items())


def activation_errors(model, ctx, x_t: np.ndarray, t: int, source: str = "live") -> dict[str, tuple[float, float]]:
    """(MSE, SQNR) of each site's activation quantizer at step ``t`` on inputs ``x_t``."""
    taps: dict[str, np.ndarray] = {}
    out = {}
    with no_grad():
        model(x_t, t, ctx, source=source, taps=taps)
        for site in model.sites:
            a = Tensor(taps[site])
            q = ctx.quantize_activation(site, a, t, source).data
            out[site] = (quant_mse(a.data, q), sqnr_db(a.data, q))
    return out


def parse_report(text: str) -> list[dict[str, str]]:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append(dict(kv.split("=", 1) for kv in line.split()))
    return rows
