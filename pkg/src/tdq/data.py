"""Exactly samplable 2D toy distributions."""

import numpy as np

from .numerics import RandomStream


def gaussian_ring(n: int, rng: RandomStream, modes: int = 8, radius: float = 4.0, std: float = 0.1) -> np.ndarray:
    """Mixture of ``modes`` isotropic Gaussians evenly spaced on a circle."""
    k = rng.integers(0, modes, n)
    ang = 2.0 * np.pi * k / modes
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return (centers + std * rng.normal((n, 2), dtype=np.float64)).astype(np.float32)


def single_gaussian(n: int, rng: RandomStream, mean=(1.0, -0.5), std: float = 0.5) -> np.ndarray:
    return (np.asarray(mean) + std * rng.normal((n, len(mean)), dtype=np.float64)).astype(np.float32)
