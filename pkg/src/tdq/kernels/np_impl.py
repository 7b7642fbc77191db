"""Pure-numpy kernels. Reference path, and the fallback when numba is off."""

import numpy as np


def round_half_away(u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    fl = np.floor(a)
    r = fl + ((a - fl) >= 0.5)
    return np.copysign(r, u)


def fake_quant_fwd(x, s, z, n, p):
    """Flat x, s, z of equal length. Returns (xhat, xbar) in x's dtype / float64."""
    u = x.astype(np.float64) / s
    zr = round_half_away(z)
    q = np.clip(round_half_away(u) + zr, n, p)
    xhat = (s * (q - zr)).astype(x.dtype)
    return xhat, q


def fake_quant_bwd(x, s, z, g, n, p):
    """Per-element STE gradients (dx, ds, dz) for flat inputs."""
    u = x.astype(np.float64) / s
    zr = round_half_away(z)
    v = u + zr
    low = v < n
    high = v > p
    inside = ~(low | high)
    g = g.astype(np.float64)
    dx = np.where(inside, g, 0.0)
    ds = g * np.where(inside, round_half_away(u) - u, np.where(low, n - zr, p - zr))
    dz = np.where(inside, 0.0, -g * s)
    return dx.astype(x.dtype), ds, dz


def quant_sse_grid(x, candidates, z, n, p):
    """Sum of squared fake-quant error of flat ``x`` for each candidate interval."""
    x = x.astype(np.float64)
    zr = float(round_half_away(np.float64(z)))
    out = np.empty(len(candidates))
    for i, s in enumerate(candidates):
        q = np.clip(round_half_away(x / s) + zr, n, p)
        d = s * (q - zr) - x
        out[i] = float(d @ d)
    return out


def assignment(cost: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching on a square matrix; returns column per row.

    Shortest-augmenting-path Hungarian method with potentials; the inner scan
    over columns is vectorized.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_cols = np.empty(n, dtype=np.int64)
    rows_to_cols[p[1:] - 1] = np.arange(n)
    return rows_to_cols
