"""Hot loops, compiled with numba unless ``TDQ_DISABLE_NUMBA=1``.

Both implementations stay importable (``np_impl``, ``nb_impl``) so tests and
the benchmark can compare them directly. ``TDQ_THREADS`` caps numba's pool.
"""

import os

import numpy as np

from . import np_impl

_disabled = os.environ.get("TDQ_DISABLE_NUMBA", "0").lower() not in ("0", "", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by TDQ_DISABLE_NUMBA")
    import numba

    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # try TBB last: its version probe warns on older installs
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    from . import nb_impl

    _threads = os.environ.get("TDQ_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
    BACKEND = "numba"
    _impl = nb_impl
except ImportError:
    nb_impl = None
    BACKEND = "numpy"
    _impl = np_impl

round_half_away = np_impl.round_half_away


def _flat(a, size, dtype):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=dtype), size)).ravel()


def fake_quant_fwd(x: np.ndarray, s, z, n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Fake-quantize ``x`` with broadcastable interval ``s`` and offset ``z``.

    Returns ``(x_hat, x_bar)`` shaped like ``x``; ``x_bar`` holds the integer
    indices as float64.
    """
    shape = x.shape
    xf = np.ascontiguousarray(x).ravel()
    xhat, xbar = _impl.fake_quant_fwd(xf, _flat(s, shape, np.float64), _flat(z, shape, np.float64), float(n), float(p))
    return xhat.reshape(shape), xbar.reshape(shape)


def fake_quant_bwd(x: np.ndarray, s, z, g: np.ndarray, n: int, p: int):
    """Elementwise STE gradients ``(dx, ds, dz)``, each shaped like ``x``."""
    shape = x.shape
    dx, ds, dz = _impl.fake_quant_bwd(
        np.ascontiguousarray(x).ravel(),
        _flat(s, shape, np.float64),
        _flat(z, shape, np.float64),
        _flat(g, shape, np.float64),
        float(n),
        float(p),
    )
    return dx.reshape(shape), ds.reshape(shape), dz.reshape(shape)


def quant_sse_grid(x: np.ndarray, candidates: np.ndarray, z: float, n: int, p: int) -> np.ndarray:
    return _impl.quant_sse_grid(
        np.ascontiguousarray(x, dtype=np.float64).ravel(),
        np.ascontiguousarray(candidates, dtype=np.float64),
        float(z),
        float(n),
        float(p),
    )


def assignment(cost: np.ndarray) -> np.ndarray:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"assignment needs a square cost matrix, got {cost.shape}")
    if cost.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return _impl.assignment(cost)
