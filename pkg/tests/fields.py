"""Closed-form velocity fields for sampler tests."""

import numpy as np


class LinearGaussianField:
    """Exact flow-matching velocity for standard-normal data and noise in
    ``dim`` dimensions: ``E[x1 - x0 | x_t] = x_t (2t - 1) / ((1-t)^2 + t^2)``."""

    def __init__(self, dim: int = 1):
        self.dim = dim

    def velocity(self, x, t, embs):
        t = np.asarray(t, dtype=np.float64)[:, None]
        return x * (2 * t - 1) / ((1 - t) ** 2 + t**2)
