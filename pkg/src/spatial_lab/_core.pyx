# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Contract identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, log, M_PI

cnp.import_array()


cdef inline bint _holds(const double[:, :, ::1] pos, Py_ssize_t i, long s, long p, long o,
                        double margin, double d_near, double d_far) nogil:
    cdef double ax = pos[i, s, 0], ay = pos[i, s, 1]
    cdef double bx = pos[i, o, 0], by = pos[i, o, 1]
    cdef double dx, dy, dist
    if p == 0:
        return ax < bx - margin
    elif p == 1:
        return ax > bx + margin
    elif p == 2:
        return ay > by + margin
    elif p == 3:
        return ay < by - margin
    dx = ax - bx
    dy = ay - by
    dist = sqrt(dx * dx + dy * dy)
    if p == 4:
        return dist < d_near
    return dist > d_far


def _check_atoms(cnp.int64_t[:, ::1] atoms):
    cdef Py_ssize_t r
    for r in range(atoms.shape[0]):
        if atoms[r, 1] < 0 or atoms[r, 1] > 5:
            raise ValueError(f"unknown predicate code {atoms[r, 1]}")


def count_satisfied(pos, atoms, double margin, double d_near, double d_far):
    cdef const double[:, :, ::1] P = np.ascontiguousarray(pos, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] A = np.ascontiguousarray(atoms, dtype=np.int64).reshape(-1, 3)
    _check_atoms(A)
    cdef Py_ssize_t n = P.shape[0], R = A.shape[0], i, r
    out = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] O = out
    with nogil:
        for i in range(n):
            for r in range(R):
                if _holds(P, i, A[r, 0], A[r, 1], A[r, 2], margin, d_near, d_far):
                    O[i] += 1
    return out


def first_satisfying(pos, atoms, double margin, double d_near, double d_far):
    cdef const double[:, :, ::1] P = np.ascontiguousarray(pos, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] A = np.ascontiguousarray(atoms, dtype=np.int64).reshape(-1, 3)
    _check_atoms(A)
    cdef Py_ssize_t n = P.shape[0], R = A.shape[0], i, r
    cdef Py_ssize_t found = -1
    cdef bint ok
    with nogil:
        for i in range(n):
            ok = True
            for r in range(R):
                if not _holds(P, i, A[r, 0], A[r, 1], A[r, 2], margin, d_near, d_far):
                    ok = False
                    break
            if ok:
                found = i
                break
    return int(found)


def em_step(x, v, t, dt, sigma, eps):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:, ::1] E = np.ascontiguousarray(eps, dtype=np.float64)
    cdef const double[::1] T = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[::1] DT = np.ascontiguousarray(dt, dtype=np.float64)
    cdef const double[::1] S = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    nxt = np.empty((n, d), dtype=np.float64)
    mean = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] NX = nxt
    cdef double[:, ::1] M = mean
    cdef double coef, std, one_minus_t, drift, m
    with nogil:
        for i in range(n):
            coef = S[i] * S[i] / (2.0 * T[i])
            one_minus_t = 1.0 - T[i]
            std = S[i] * sqrt(fabs(DT[i]))
            for j in range(d):
                drift = V[i, j] + coef * (X[i, j] + one_minus_t * V[i, j])
                m = X[i, j] + drift * DT[i]
                M[i, j] = m
                NX[i, j] = m + std * E[i, j]
    return nxt, mean


def gauss_logpdf(x, mean, std):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] M = np.ascontiguousarray(mean, dtype=np.float64)
    cdef const double[::1] S = np.ascontiguousarray(std, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] O = out
    cdef double acc, z, half_log_2pi = 0.5 * log(2.0 * M_PI)
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                z = (X[i, j] - M[i, j]) / S[i]
                acc += z * z
            O[i] = -0.5 * acc - d * log(S[i]) - d * half_log_2pi
    return out
