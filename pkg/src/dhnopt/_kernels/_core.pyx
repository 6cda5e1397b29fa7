# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``_pure``: implicit-midpoint marching and the RK4 oracle.

Keep the arithmetic in lock-step with the fallback; tests assert that both
implementations produce identical floating-point results.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport copysign, fabs, sqrt

cnp.import_array()

IMPL = "compiled"


def midpoint_propagate(double alpha, double beta, double gamma, double zeta,
                       double e_in, double dx, long n):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n + 1)
    cdef double e = e_in
    cdef double r = zeta / dx
    cdef double a, b, c, disc, sq, q, r1, r2, d1, d2
    cdef long k
    out[0] = e_in
    for k in range(1, n + 1):
        a = 0.25 * alpha
        b = 0.5 * alpha * e + 0.5 * beta - r
        c = r * e + 0.25 * alpha * e * e + 0.5 * beta * e + gamma
        if a == 0.0:
            e = -c / b
        else:
            disc = b * b - 4.0 * a * c
            if disc < 0.0:
                raise ArithmeticError(
                    "no real root in midpoint step %d (disc=%.3e)" % (k, disc)
                )
            sq = sqrt(disc)
            if b != 0.0:
                q = -0.5 * (b + copysign(sq, b))
            else:
                q = -0.5 * sq
            if q == 0.0:
                e = 0.0
            else:
                r1 = q / a
                r2 = c / q
                d1 = fabs(r1 - e)
                d2 = fabs(r2 - e)
                if d1 < d2:
                    e = r1
                elif d2 < d1:
                    e = r2
                else:
                    e = min(r1, r2)
        out[k] = e
    return out


def rk4_integrate(double alpha, double beta, double gamma, double zeta,
                  double e_in, double length, long n_steps, record_idx):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.asarray(record_idx, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(idx.shape[0])
    cdef double h = length / n_steps
    cdef double inv_zeta = 1.0 / zeta
    cdef double e = e_in
    cdef double k1, k2, k3, k4, e2, e3, e4
    cdef long k
    cdef Py_ssize_t pos = 0
    if idx[pos] == 0:
        out[pos] = e_in
        pos += 1
    for k in range(1, n_steps + 1):
        k1 = (alpha * e * e + beta * e + gamma) * inv_zeta
        e2 = e + 0.5 * h * k1
        k2 = (alpha * e2 * e2 + beta * e2 + gamma) * inv_zeta
        e3 = e + 0.5 * h * k2
        k3 = (alpha * e3 * e3 + beta * e3 + gamma) * inv_zeta
        e4 = e + h * k3
        k4 = (alpha * e4 * e4 + beta * e4 + gamma) * inv_zeta
        e = e + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if pos < idx.shape[0] and idx[pos] == k:
            out[pos] = e
            pos += 1
    return out
