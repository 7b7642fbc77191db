"""Time-step-aware dynamic activation quantization for toy diffusion models."""

import os

_threads = os.environ.get("TDQ_THREADS")
if _threads:
    # only effective when numpy has not been imported yet
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
