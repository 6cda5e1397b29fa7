"""Hot-water pipe flow: model catalog, closed-form energy profiles, and
implicit-midpoint discretizations.

Three model levels describe the internal energy density e(x) [J/m3] along a
pipe (level 1 is the most accurate):

  level 1: zeta * e' = alpha*e^2 + beta*e + gamma_1   (friction heating and
           wall heat loss),
  level 2: same with the friction term dropped from gamma,
  level 3: e conserved along the pipe.

The quadratic right-hand side comes from eliminating the temperature through
the quadratic state equation T(e). Levels 1-2 admit a closed-form solution
(a constant-coefficient Riccati equation); their implicit-midpoint
discretizations reduce to one scalar quadratic per grid step, so discrete
profiles are computed in linear time without any nonlinear solver.

All quantities are strict SI. The pressure equation is shared by all levels
and handled separately by ``pressure_drop``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels

GRAVITY = 9.80665  # m/s^2

#: Below this speed the energy equation is treated as no-flow: the profile
#: is constant and all error measures vanish (the ODE divides by velocity).
V_MIN = 1e-6  # m/s

LEVELS = (1, 2, 3)


@dataclass(frozen=True)
class StateEquationConstants:
    """Coefficients of T(e) = theta2*(e/e0)^2 + theta1*(e/e0) + theta0 and
    the (constant) water density. Valid for e in [0.2, 0.5] GJ/m3."""

    theta2: float = 59.2453  # K
    theta1: float = 220.536  # K
    theta0: float = 274.93729  # K
    e0: float = 1e9  # J/m3
    rho: float = 997.0  # kg/m3


DEFAULT_CONSTANTS = StateEquationConstants()

VALIDITY_RANGE = (0.2e9, 0.5e9)  # J/m3


class DegenerateVelocity(ValueError):
    """Velocity magnitude at or below V_MIN where the energy ODE is singular."""


class DiscriminantViolation(ArithmeticError):
    """4*alpha*gamma - beta^2 >= 0: the closed-form solution does not apply."""


class PoleEncountered(ArithmeticError):
    """The closed-form denominator vanishes inside the evaluation interval."""


class NoRealRoot(ArithmeticError):
    """An implicit-midpoint step quadratic has no real root."""


def temperature_of_energy(e, constants: StateEquationConstants = DEFAULT_CONSTANTS):
    """Water temperature [K] for internal energy density e [J/m3].

    Warns (does not fail) outside the fitted validity range.
    """
    e = np.asarray(e, dtype=float)
    if np.any(e < VALIDITY_RANGE[0]) or np.any(e > VALIDITY_RANGE[1]):
        warnings.warn(
            "energy density outside state-equation validity range "
            "[0.2, 0.5] GJ/m3",
            stacklevel=2,
        )
    s = e / constants.e0
    result = constants.theta2 * s * s + constants.theta1 * s + constants.theta0
    return float(result) if result.ndim == 0 else result


def energy_of_temperature(t, constants: StateEquationConstants = DEFAULT_CONSTANTS):
    """Inverse of ``temperature_of_energy`` on its increasing branch."""
    t = np.asarray(t, dtype=float)
    disc = constants.theta1**2 - 4.0 * constants.theta2 * (constants.theta0 - t)
    if np.any(disc < 0.0):
        raise ValueError("temperature below the state-equation minimum")
    s = (-constants.theta1 + np.sqrt(disc)) / (2.0 * constants.theta2)
    result = s * constants.e0
    return float(result) if result.ndim == 0 else result


@dataclass(frozen=True)
class RiccatiCoefficients:
    """Constant coefficients of zeta * e' = alpha*e^2 + beta*e + gamma."""

    alpha: float
    beta: float
    gamma: float
    zeta: float

    @property
    def discriminant(self) -> float:
        """beta^2 - 4*alpha*gamma; must be positive for the closed form."""
        return self.beta * self.beta - 4.0 * self.alpha * self.gamma

    def rhs(self, e):
        return (self.alpha * e + self.beta) * e + self.gamma


def _coefficients(level, pipe, v, constants=DEFAULT_CONSTANTS):
    """Raw coefficients for one pipe at |v|; no discriminant check.

    ``zeta`` is |v|: profiles are always marched downstream from the
    physical inflow end, and gamma is even in v.
    """
    if level not in (1, 2):
        raise ValueError(f"energy ODE coefficients only exist for levels 1-2, got {level}")
    d = pipe.diameter
    hc = pipe.heat_transfer
    c = constants
    alpha = -4.0 * hc * c.theta2 / (d * c.e0 * c.e0)
    beta = -4.0 * hc * c.theta1 / (d * c.e0)
    gamma = -4.0 * hc / d * (c.theta0 - pipe.wall_temperature)
    if level == 1:
        gamma += pipe.friction / (2.0 * d) * c.rho * abs(v) * v * v
    return RiccatiCoefficients(alpha, beta, gamma, abs(v))


def riccati_coefficients(level, pipe, v, constants=DEFAULT_CONSTANTS):
    """Validated coefficients for the closed-form solution.

    Raises ``DegenerateVelocity`` for |v| <= V_MIN and
    ``DiscriminantViolation`` when 4*alpha*gamma - beta^2 >= 0.
    """
    if abs(v) <= V_MIN:
        raise DegenerateVelocity(f"|v|={abs(v):.3e} m/s is below the no-flow cutoff")
    coeff = _coefficients(level, pipe, v, constants)
    if not (coeff.discriminant > 0.0):
        raise DiscriminantViolation(
            f"4*alpha*gamma - beta^2 = {-coeff.discriminant:.6e} >= 0 "
            f"for pipe {getattr(pipe, 'id', '?')}"
        )
    return coeff


def exact_energy_profile(level, pipe, v, e_in, xs, constants=DEFAULT_CONSTANTS):
    """Closed-form energy profile e(x) at positions xs in [0, L].

    ``e_in`` is the energy at the physical inflow end (x=0 for v>0, x=L for
    v<0); negative velocities are handled by mirroring x -> L - x. Level 3
    conserves energy, so its profile is constant. |v| <= V_MIN is treated
    as no-flow (constant profile).
    """
    xs = np.asarray(xs, dtype=float)
    if np.any(xs < -1e-9) or np.any(xs > pipe.length * (1 + 1e-12) + 1e-9):
        raise ValueError("positions outside [0, L]")
    if level == 3 or abs(v) <= V_MIN:
        return np.full(xs.shape, float(e_in))
    coeff = riccati_coefficients(level, pipe, v, constants)
    s = xs if v > 0 else pipe.length - xs
    return _closed_form(coeff, e_in, s)


def _closed_form(coeff: RiccatiCoefficients, e_in, s):
    """Evaluate the Riccati closed form at downstream distances s >= 0."""
    sq = math.sqrt(coeff.discriminant)
    two_a = 2.0 * coeff.alpha
    num = two_a * e_in + coeff.beta - sq
    den = two_a * e_in + coeff.beta + sq
    if den == 0.0:
        # e_in sits exactly on an equilibrium root; the limit is constant.
        return np.full(np.shape(s), float(e_in))
    k = num / den
    s = np.asarray(s, dtype=float)
    growth = np.exp(s * (sq / coeff.zeta))
    denom = 1.0 - growth * k
    ref_sign = math.copysign(1.0, 1.0 - k)
    if np.any(denom == 0.0) or np.any(np.sign(denom) != ref_sign):
        raise PoleEncountered(
            "closed-form denominator changes sign inside the pipe"
        )
    values = (sq / two_a) * (1.0 + growth * k) / denom - coeff.beta / two_a
    # Honor the initial condition exactly at the inflow point.
    return np.where(s == 0.0, float(e_in), values)


def pressure_drop(pipe, v, rho=DEFAULT_CONSTANTS.rho):
    """p(L) - p(0) [Pa]: friction plus elevation, identical at all levels."""
    return -pipe.length * (
        pipe.friction / (2.0 * pipe.diameter) * rho * abs(v) * v
        + GRAVITY * rho * pipe.slope
    )


def midpoint_energy_step(level, pipe, v, e_prev, dx, constants=DEFAULT_CONSTANTS):
    """One implicit-midpoint step of length dx downstream from e_prev.

    Solves the scalar quadratic in the next energy and returns the root
    nearer to e_prev (ties break toward the smaller, i.e. cooling, root).
    """
    if abs(v) <= V_MIN:
        raise DegenerateVelocity(f"|v|={abs(v):.3e} m/s is below the no-flow cutoff")
    coeff = _coefficients(level, pipe, v, constants)
    try:
        return float(
            _kernels.midpoint_propagate(
                coeff.alpha, coeff.beta, coeff.gamma, coeff.zeta, e_prev, dx, 1
            )[1]
        )
    except ArithmeticError as exc:
        raise NoRealRoot(str(exc)) from exc


@dataclass(frozen=True)
class PipeGrid:
    """Equidistant grid over [0, L] with n = 2^index intervals.

    Grids only ever change by halving or doubling the step, so every grid
    contains the two-point reference grid {0, L} used to evaluate error
    measures.
    """

    length: float
    n: int

    def __post_init__(self):
        if self.n < 1 or self.n & (self.n - 1):
            raise ValueError(f"interval count must be a power of two, got {self.n}")
        if self.length <= 0:
            raise ValueError("grid needs positive length")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def index(self) -> int:
        return self.n.bit_length() - 1

    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n + 1)

    def refined(self) -> "PipeGrid":
        return PipeGrid(self.length, self.n * 2)

    def coarsened(self) -> "PipeGrid":
        if self.n < 2:
            raise ValueError("cannot coarsen the two-point reference grid")
        return PipeGrid(self.length, self.n // 2)


@dataclass(frozen=True)
class PipeAssignment:
    """Current model level and discretization grid of one pipe."""

    level: int
    grid: PipeGrid

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"model level must be in {LEVELS}, got {self.level}")


def propagate_energy_discrete(level, pipe, v, e_in, grid: PipeGrid,
                              constants=DEFAULT_CONSTANTS):
    """Discrete energy values at all grid points, marched from the inflow end.

    Runs in time linear in the interval count. Level 3 (and no-flow) yields
    a constant profile. For v < 0 the recursion runs from x = L and the
    returned array is still ordered by ascending x.
    """
    if level == 3 or abs(v) <= V_MIN:
        return np.full(grid.n + 1, float(e_in))
    coeff = _coefficients(level, pipe, v, constants)
    try:
        values = _kernels.midpoint_propagate(
            coeff.alpha, coeff.beta, coeff.gamma, coeff.zeta, e_in, grid.dx, grid.n
        )
    except ArithmeticError as exc:
        raise NoRealRoot(f"pipe {getattr(pipe, 'id', '?')}: {exc}") from exc
    return values if v > 0 else values[::-1].copy()


def rk4_energy_profile(level, pipe, v, e_in, xs, steps_per_length=1_000_000,
                       constants=DEFAULT_CONSTANTS):
    """Fixed-step RK4 reference integration of the levels 1-2 energy ODE.

    Independent oracle for ``exact_energy_profile``: same coefficients, but
    integrated numerically with ``steps_per_length`` steps over [0, L].
    Positions must lie on the uniform step raster.
    """
    if level == 3 or abs(v) <= V_MIN:
        return np.full(np.shape(xs), float(e_in))
    coeff = _coefficients(level, pipe, v, constants)
    xs = np.asarray(xs, dtype=float)
    s = xs if v > 0 else pipe.length - xs
    order = np.argsort(s)
    idx = np.rint(s[order] / pipe.length * steps_per_length).astype(np.int64)
    values = _kernels.rk4_integrate(
        coeff.alpha, coeff.beta, coeff.gamma, coeff.zeta,
        e_in, pipe.length, steps_per_length, idx,
    )
    out = np.empty_like(values)
    out[order] = values
    return out
