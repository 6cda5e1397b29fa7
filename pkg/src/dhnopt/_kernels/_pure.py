"""Pure-Python fallback for the hot per-pipe kernels.

Semantics must match ``_core.pyx`` exactly (same operation order, same IEEE
arithmetic); the compiled module is just faster. Both kernels advance the
water's internal energy density e [J/m3] along a pipe, with the quadratic
right-hand side alpha*e^2 + beta*e + gamma and transport speed zeta [m/s].
"""

import math

import numpy as np

IMPL = "pure"


def midpoint_propagate(alpha, beta, gamma, zeta, e_in, dx, n):
    """March the implicit-midpoint energy recursion over n equal steps.

    Each step solves the scalar quadratic obtained by inserting the
    midpoint value m = (e_prev + e_next)/2 into the right-hand side:

        zeta * (e_next - e_prev) / dx = alpha*m^2 + beta*m + gamma

    The root nearer to e_prev is taken (ties toward the smaller root, since
    cooling is the physical branch). Returns an array of n+1 energies.

    Raises ``ArithmeticError`` when the step quadratic has no real root.
    """
    out = np.empty(n + 1)
    out[0] = e_in
    e = e_in
    r = zeta / dx
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
                    f"no real root in midpoint step {k} (disc={disc:.3e})"
                )
            sq = math.sqrt(disc)
            q = -0.5 * (b + math.copysign(sq, b)) if b != 0.0 else -0.5 * sq
            if q == 0.0:
                e = 0.0
            else:
                r1 = q / a
                r2 = c / q
                d1 = abs(r1 - e)
                d2 = abs(r2 - e)
                if d1 < d2:
                    e = r1
                elif d2 < d1:
                    e = r2
                else:
                    e = min(r1, r2)
        out[k] = e
    return out


def rk4_integrate(alpha, beta, gamma, zeta, e_in, length, n_steps, record_idx):
    """Classical fixed-step RK4 on de/dx = (alpha*e^2 + beta*e + gamma)/zeta.

    Integrates from x=0 to x=length in ``n_steps`` equal steps and records
    the state at the step indices in ``record_idx`` (sorted, first entry 0).
    Used as the independent verification oracle for the closed-form profile.
    """
    h = length / n_steps
    inv_zeta = 1.0 / zeta
    record_idx = np.asarray(record_idx, dtype=np.int64)
    out = np.empty(record_idx.shape[0])
    pos = 0
    if record_idx[pos] == 0:
        out[pos] = e_in
        pos += 1
    e = e_in
    for k in range(1, n_steps + 1):
        k1 = (alpha * e * e + beta * e + gamma) * inv_zeta
        e2 = e + 0.5 * h * k1
        k2 = (alpha * e2 * e2 + beta * e2 + gamma) * inv_zeta
        e3 = e + 0.5 * h * k2
        k3 = (alpha * e3 * e3 + beta * e3 + gamma) * inv_zeta
        e4 = e + h * k3
        k4 = (alpha * e4 * e4 + beta * e4 + gamma) * inv_zeta
        e = e + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if pos < record_idx.shape[0] and record_idx[pos] == k:
            out[pos] = e
            pos += 1
    return out
