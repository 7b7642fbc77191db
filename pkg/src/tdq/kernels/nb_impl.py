"""numba versions of the hot loops in :mod:`np_impl`; same signatures."""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _rha(u):
    a = abs(u)
    fl = np.floor(a)
    r = fl + 1.0 if a - fl >= 0.5 else fl
    return r if u >= 0 else -r


@njit(cache=True)
def fake_quant_fwd(x, s, z, n, p):
    m = x.shape[0]
    xhat = np.empty_like(x)
    xbar = np.empty(m)
    for i in range(m):
        si = np.float64(s[i])
        zr = _rha(np.float64(z[i]))
        q = _rha(np.float64(x[i]) / si) + zr
        if q < n:
            q = n
        elif q > p:
            q = p
        xbar[i] = q
        xhat[i] = si * (q - zr)
    return xhat, xbar


@njit(cache=True)
def fake_quant_bwd(x, s, z, g, n, p):
    m = x.shape[0]
    dx = np.empty_like(x)
    ds = np.empty(m)
    dz = np.empty(m)
    for i in range(m):
        si = np.float64(s[i])
        zr = _rha(np.float64(z[i]))
        u = np.float64(x[i]) / si
        v = u + zr
        gi = np.float64(g[i])
        if v < n:
            dx[i] = 0.0
            ds[i] = gi * (n - zr)
            dz[i] = -gi * si
        elif v > p:
            dx[i] = 0.0
            ds[i] = gi * (p - zr)
            dz[i] = -gi * si
        else:
            dx[i] = gi
            ds[i] = gi * (_rha(u) - u)
            dz[i] = 0.0
    return dx, ds, dz


# reassoc lets the sum vectorize; only the order of the final accumulation changes
@njit(cache=True, parallel=True, fastmath={"reassoc"})
def quant_sse_grid(x, candidates, z, n, p):
    zr = _rha(np.float64(z))
    k = candidates.shape[0]
    out = np.empty(k)
    for c in prange(k):
        s = candidates[c]
        acc = 0.0
        for i in range(x.shape[0]):
            xi = np.float64(x[i])
            q = min(max(_rha(xi / s) + zr, n), p)
            d = s * (q - zr) - xi
            acc += d * d
        out[c] = acc
    return out


@njit(cache=True)
def assignment(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        out[p[j] - 1] = j - 1
    return out
