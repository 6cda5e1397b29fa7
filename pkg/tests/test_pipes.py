"""Pipe model kernels: state equation, closed forms, midpoint stepping."""

import numpy as np
import pytest

from conftest import random_flow_state, random_pipe
from dhnopt import pipes
from dhnopt.pipes import (
    DegenerateVelocity,
    DiscriminantViolation,
    PipeAssignment,
    PipeGrid,
    energy_of_temperature,
    exact_energy_profile,
    midpoint_energy_step,
    pressure_drop,
    propagate_energy_discrete,
    riccati_coefficients,
    rk4_energy_profile,
    temperature_of_energy,
)


class TestStateEquation:
    def test_zero_energy_gives_constant_term(self):
        assert temperature_of_energy(0.0) == pytest.approx(274.93729, abs=0)

    @pytest.mark.parametrize("e, expected", [
        # frozen from exact evaluation of the quadratic with the table
        # coefficients (30-digit arithmetic)
        (0.35e9, 359.38243925),
        (0.5e9, 400.016615),
    ])
    def test_tabulated_values(self, e, expected):
        assert temperature_of_energy(e) == pytest.approx(expected, rel=1e-12)

    def test_upper_value_inside_validity_band(self):
        assert 323.0 <= temperature_of_energy(0.5e9) <= 403.0

    def test_warns_outside_validity_range(self):
        with pytest.warns(UserWarning):
            temperature_of_energy(0.1e9)

    def test_inverse_round_trip(self):
        for e in np.linspace(0.2e9, 0.5e9, 7):
            t = temperature_of_energy(e)
            assert energy_of_temperature(t) == pytest.approx(e, rel=1e-12)


class TestRiccatiCoefficients:
    def test_level1_discriminant_positive(self, fig_pipe):
        coeff = riccati_coefficients(1, fig_pipe, 1.0)
        assert coeff.discriminant > 0

    def test_level2_gamma_value(self, fig_pipe):
        # -(4 * 0.5 / 0.107) * (274.93729 - 278), evaluated exactly
        coeff = riccati_coefficients(2, fig_pipe, 1.0)
        assert coeff.gamma == pytest.approx(57.246915887850467, rel=1e-12)

    def test_zero_heat_transfer_degenerates(self, fig_pipe):
        from dataclasses import replace
        bare = replace(fig_pipe, heat_transfer=0.0)
        with pytest.raises(DiscriminantViolation):
            riccati_coefficients(2, bare, 1.0)

    def test_velocity_cutoff(self, fig_pipe):
        with pytest.raises(DegenerateVelocity):
            riccati_coefficients(1, fig_pipe, 1e-7)

    def test_level3_has_no_coefficients(self, fig_pipe):
        with pytest.raises(ValueError):
            riccati_coefficients(3, fig_pipe, 1.0)


class TestExactProfile:
    def test_level3_is_constant(self, fig_pipe):
        prof = exact_energy_profile(3, fig_pipe, 1.0, 0.41e9, [0.0, 500.0, 1000.0])
        assert np.all(prof == 0.41e9)

    def test_initial_condition_exact(self, fig_pipe):
        prof = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9, [0.0])
        assert prof[0] == 0.35e9

    def test_matches_rk4_reference(self, fig_pipe):
        xs = np.array([0.0, 250.0, 500.0, 1000.0])
        exact = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9, xs)
        reference = rk4_energy_profile(1, fig_pipe, 1.0, 0.35e9, xs)
        assert np.max(np.abs(exact - reference) / np.abs(reference)) < 1e-8

    def test_wall_temperature_equilibrium_is_constant(self, fig_pipe):
        e_eq = energy_of_temperature(fig_pipe.wall_temperature)
        prof = exact_energy_profile(2, fig_pipe, 1.0, e_eq, [0.0, 400.0, 1000.0])
        assert prof == pytest.approx([e_eq] * 3, rel=1e-9)

    def test_monotone_cooling_level2(self, fig_pipe):
        xs = np.linspace(0.0, 1000.0, 40)
        prof = exact_energy_profile(2, fig_pipe, 1.0, 0.35e9, xs)
        assert np.all(np.diff(prof) < 0)

    def test_negative_velocity_mirrors(self, fig_pipe):
        xs = np.linspace(0.0, 1000.0, 9)
        fwd = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9, xs)
        bwd = exact_energy_profile(1, fig_pipe, -1.0, 0.35e9, xs)
        assert bwd == pytest.approx(fwd[::-1], rel=1e-14)

    def test_random_draws_match_rk4(self, fig_pipe):
        rng = np.random.default_rng(7)
        for _ in range(10):
            pipe = random_pipe(rng)
            v, e_in = random_flow_state(rng)
            level = int(rng.integers(1, 3))
            xs = np.array([0.0, pipe.length / 2, pipe.length])
            exact = exact_energy_profile(level, pipe, v, e_in, xs)
            ref = rk4_energy_profile(level, pipe, v, e_in, xs,
                                     steps_per_length=200_000)
            assert np.max(np.abs(exact - ref) / np.abs(ref)) < 1e-7


class TestPressureDrop:
    def test_no_flow_flat_pipe(self, fig_pipe):
        assert pressure_drop(fig_pipe, 0.0) == 0.0

    def test_reference_value(self, fig_pipe):
        # -L * lambda/(2D) * rho * |v| v at v = 1: frozen from exact
        # evaluation (0.017/0.214 * 997 * 1000)
        assert pressure_drop(fig_pipe, 1.0) == pytest.approx(
            -79200.93457943925, rel=1e-12)

    def test_antisymmetric_in_velocity(self, fig_pipe):
        assert pressure_drop(fig_pipe, -1.3) == -pressure_drop(fig_pipe, 1.3)

    def test_level_independent(self, fig_pipe):
        # the momentum relation has no model-level argument at all
        assert pressure_drop(fig_pipe, 0.7) == pressure_drop(fig_pipe, 0.7)


def _step_residual(pipe, level, v, e_prev, e_next, dx):
    coeff = pipes._coefficients(level, pipe, v)
    m = 0.5 * (e_prev + e_next)
    return coeff.zeta * (e_next - e_prev) / dx - coeff.rhs(m)


class TestMidpointStep:
    def test_equilibrium_is_fixed_point(self, fig_pipe):
        coeff = pipes._coefficients(1, fig_pipe, 1.0)
        # physical root of alpha e^2 + beta e + gamma = 0
        e_eq = (-coeff.beta - np.sqrt(coeff.discriminant)) / (2 * coeff.alpha)
        e_next = midpoint_energy_step(1, fig_pipe, 1.0, e_eq, 500.0)
        assert e_next == pytest.approx(e_eq, rel=1e-12)

    def test_matches_bisection_oracle(self, fig_pipe):
        e_prev, dx, v = 0.35e9, 500.0, 1.0
        lo, hi = 0.2e9, 0.5e9
        assert _step_residual(fig_pipe, 2, v, e_prev, lo, dx) * \
            _step_residual(fig_pipe, 2, v, e_prev, hi, dx) < 0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _step_residual(fig_pipe, 2, v, e_prev, lo, dx) * \
                    _step_residual(fig_pipe, 2, v, e_prev, mid, dx) <= 0:
                hi = mid
            else:
                lo = mid
        oracle = 0.5 * (lo + hi)
        e_next = midpoint_energy_step(2, fig_pipe, v, e_prev, dx)
        assert e_next == pytest.approx(oracle, rel=1e-10)

    def test_consistency_as_dx_vanishes(self, fig_pipe):
        coeff = pipes._coefficients(1, fig_pipe, 1.0)
        slope = abs(coeff.rhs(0.35e9) / coeff.zeta)
        for dx in (1.0, 0.1, 0.01):
            e_next = midpoint_energy_step(1, fig_pipe, 1.0, 0.35e9, dx)
            assert abs(e_next - 0.35e9) <= 2.0 * slope * dx

    def test_residual_small(self, fig_pipe):
        e_next = midpoint_energy_step(1, fig_pipe, 1.0, 0.35e9, 500.0)
        res = _step_residual(fig_pipe, 1, 1.0, 0.35e9, e_next, 500.0)
        assert abs(res) <= 1e-12 * max(1.0, abs(0.35e9 / 500.0))


class TestPropagation:
    def test_level3_constant(self, fig_pipe):
        grid = PipeGrid(1000.0, 8)
        values = propagate_energy_discrete(3, fig_pipe, 1.0, 0.37e9, grid)
        assert values.shape == (9,)
        assert np.all(values == 0.37e9)

    def test_refinement_shrinks_error(self, fig_pipe):
        xs = np.array([0.0, 500.0, 1000.0])
        exact = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9, xs)
        coarse = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9,
                                           PipeGrid(1000.0, 2))
        fine = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9,
                                         PipeGrid(1000.0, 4))
        err_coarse = np.max(np.abs(coarse - exact))
        err_fine = np.max(np.abs(fine[[0, 2, 4]] - exact))
        assert 0 < err_fine < err_coarse

    def test_mirror_symmetry(self, fig_pipe):
        grid = PipeGrid(1000.0, 8)
        fwd = propagate_energy_discrete(1, fig_pipe, 1.2, 0.4e9, grid)
        bwd = propagate_energy_discrete(1, fig_pipe, -1.2, 0.4e9, grid)
        assert np.array_equal(bwd, fwd[::-1])

    def test_order_two_convergence(self, fig_pipe):
        xs = np.array([0.0, 1000.0])
        exact = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9, xs)
        errs = []
        for n in (8, 16, 32, 64):
            vals = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9,
                                             PipeGrid(1000.0, n))
            errs.append(np.max(np.abs(vals[[0, n]] - exact)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all((orders > 1.8) & (orders < 2.2))

    def test_no_flow_convention(self, fig_pipe):
        grid = PipeGrid(1000.0, 4)
        values = propagate_energy_discrete(1, fig_pipe, 1e-8, 0.3e9, grid)
        assert np.all(values == 0.3e9)


class TestPipeGrid:
    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            PipeGrid(100.0, 3)

    def test_refine_coarsen_round_trip(self):
        grid = PipeGrid(800.0, 4)
        assert grid.refined().n == 8
        assert grid.coarsened().n == 2
        assert grid.refined().coarsened() == grid
        assert grid.index == 2

    def test_cannot_coarsen_reference(self):
        with pytest.raises(ValueError):
            PipeGrid(800.0, 1).coarsened()

    def test_points_contain_reference(self):
        grid = PipeGrid(600.0, 8)
        pts = grid.points()
        assert pts[0] == 0.0 and pts[-1] == 600.0

    def test_assignment_validates_level(self):
        with pytest.raises(ValueError):
            PipeAssignment(4, PipeGrid(100.0, 2))
