"""Pure numpy implementations of the hot kernels.

Signatures and results match the compiled ``_core`` module; predicate codes
are 0..5 = LEFT_OF, RIGHT_OF, ABOVE, BELOW, NEAR, FAR.
"""

from __future__ import annotations

import math

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def _atom_mask(pos: np.ndarray, atom, margin: float, d_near: float, d_far: float) -> np.ndarray:
    s, p, o = int(atom[0]), int(atom[1]), int(atom[2])
    a, b = pos[:, s, :], pos[:, o, :]
    if p == 0:
        return a[:, 0] < b[:, 0] - margin
    if p == 1:
        return a[:, 0] > b[:, 0] + margin
    if p == 2:
        return a[:, 1] > b[:, 1] + margin
    if p == 3:
        return a[:, 1] < b[:, 1] - margin
    dx = a[:, 0] - b[:, 0]
    dy = a[:, 1] - b[:, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    if p == 4:
        return dist < d_near
    if p == 5:
        return dist > d_far
    raise ValueError(f"unknown predicate code {p}")


def count_satisfied(pos, atoms, margin, d_near, d_far) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    counts = np.zeros(pos.shape[0], dtype=np.int64)
    for atom in np.asarray(atoms, dtype=np.int64):
        counts += _atom_mask(pos, atom, margin, d_near, d_far)
    return counts


def first_satisfying(pos, atoms, margin, d_near, d_far) -> int:
    pos = np.asarray(pos, dtype=np.float64)
    ok = np.ones(pos.shape[0], dtype=bool)
    for atom in np.asarray(atoms, dtype=np.int64):
        ok &= _atom_mask(pos, atom, margin, d_near, d_far)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else -1


def em_step(x, v, t, dt, sigma, eps):
    """Euler-Maruyama update for a batch of rows with per-row t, dt, sigma."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    dt = np.asarray(dt, dtype=np.float64)[:, None]
    sigma = np.asarray(sigma, dtype=np.float64)[:, None]
    coef = sigma * sigma / (2.0 * t)
    drift = v + coef * (x + (1.0 - t) * v)
    mean = x + drift * dt
    std = sigma * np.sqrt(np.abs(dt))
    return mean + std * eps, mean


def gauss_logpdf(x, mean, std) -> np.ndarray:
    """Row sums of the isotropic Gaussian log-density, one std per row."""
    std = np.asarray(std, dtype=np.float64)
    d = x.shape[1]
    z = (x - mean) / std[:, None]
    return -0.5 * np.sum(z * z, axis=1) - d * np.log(std) - 0.5 * d * _LOG_2PI
