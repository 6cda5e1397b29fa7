"""Exact and estimated error measures."""

import numpy as np
import pytest

from conftest import random_flow_state, random_pipe
from dhnopt import errors
from dhnopt.pipes import PipeAssignment, PipeGrid, propagate_energy_discrete

GJ = 1e9


def assign(level, length, n):
    return PipeAssignment(level, PipeGrid(length, n))


class TestModelErrorEstimate:
    def test_level1_is_exactly_zero(self, fig_pipe):
        a = assign(1, fig_pipe.length, 8)
        assert errors.estimate_model_error(fig_pipe, a, 1.0, 0.35e9) == 0.0

    def test_level3_equals_endpoint_deviation(self, fig_pipe):
        a = assign(3, fig_pipe.length, 2)
        got = errors.estimate_model_error(fig_pipe, a, 1.0, 0.35e9)
        ref = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9, a.grid)
        assert got == pytest.approx(abs(ref[-1] - 0.35e9) / GJ, rel=1e-12)

    def test_level2_below_level3(self, fig_pipe):
        a2 = assign(2, fig_pipe.length, 4)
        a3 = assign(3, fig_pipe.length, 4)
        e2 = errors.estimate_model_error(fig_pipe, a2, 1.0, 0.35e9)
        e3 = errors.estimate_model_error(fig_pipe, a3, 1.0, 0.35e9)
        assert 0 < e2 < e3

    def test_candidate_level_idempotent(self, fig_pipe):
        a = assign(2, fig_pipe.length, 4)
        base = errors.estimate_model_error(fig_pipe, a, 1.0, 0.35e9)
        again = errors.model_error_under_level(fig_pipe, a, 1.0, 0.35e9, 2)
        assert again == base

    def test_candidate_level1_is_zero(self, fig_pipe):
        a = assign(3, fig_pipe.length, 2)
        assert errors.model_error_under_level(fig_pipe, a, 1.0, 0.35e9, 1) == 0.0


class TestDiscretizationErrorEstimate:
    def test_level3_zero(self, fig_pipe):
        a = assign(3, fig_pipe.length, 4)
        assert errors.estimate_discretization_error(fig_pipe, a, 1.0, 0.35e9) == 0.0

    def test_quarter_law(self, fig_pipe):
        values = {}
        for n in (8, 16, 32):
            a = assign(1, fig_pipe.length, n)
            values[n] = errors.estimate_discretization_error(
                fig_pipe, a, 1.0, 0.35e9)
        assert values[16] == pytest.approx(values[8] / 4, rel=0.2)
        assert values[32] == pytest.approx(values[16] / 4, rel=0.2)

    def test_no_flow_zero(self, fig_pipe):
        a = assign(1, fig_pipe.length, 4)
        assert errors.estimate_discretization_error(fig_pipe, a, 1e-9, 0.35e9) == 0.0

    def test_reference_grid_falls_back_to_refinement(self, fig_pipe):
        coarse = assign(1, fig_pipe.length, 1)
        value = errors.estimate_discretization_error(fig_pipe, coarse, 1.0, 0.35e9)
        fine = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9,
                                         PipeGrid(fig_pipe.length, 2))
        one = propagate_energy_discrete(1, fig_pipe, 1.0, 0.35e9,
                                        PipeGrid(fig_pipe.length, 1))
        expected = 4.0 * abs(one[-1] - fine[-1]) / GJ
        assert value == pytest.approx(expected, rel=1e-12)


class TestExactErrors:
    def test_level1_total_equals_discretization(self, fig_pipe):
        a = assign(1, fig_pipe.length, 4)
        nu, nu_m, nu_d = errors.exact_errors(fig_pipe, a, 1.0, 0.35e9)
        assert nu_m == 0.0
        assert nu == pytest.approx(nu_d, rel=1e-12)

    def test_triangle_inequality(self, fig_pipe):
        a = assign(2, fig_pipe.length, 16)
        nu, nu_m, nu_d = errors.exact_errors(fig_pipe, a, 1.0, 0.35e9)
        assert nu <= nu_m + nu_d + 1e-15

    def test_level3_model_error_dominates(self, fig_pipe):
        from dhnopt.pipes import exact_energy_profile
        a = assign(3, fig_pipe.length, 2)
        nu, nu_m, nu_d = errors.exact_errors(fig_pipe, a, 1.0, 0.35e9)
        ref = exact_energy_profile(1, fig_pipe, 1.0, 0.35e9,
                                   [0.0, fig_pipe.length])
        assert nu_m == pytest.approx(abs(ref[1] - 0.35e9) / GJ, rel=1e-12)
        assert nu_d == 0.0

    def test_first_order_bound_random_suite(self, fig_pipe):
        rng = np.random.default_rng(11)
        for _ in range(25):
            pipe = random_pipe(rng)
            v, e_in = random_flow_state(rng)
            level = int(rng.integers(1, 4))
            a = assign(level, pipe.length, 64)
            nu, nu_m, nu_d = errors.exact_errors(pipe, a, v, e_in)
            eta = (errors.estimate_model_error(pipe, a, v, e_in)
                   + errors.estimate_discretization_error(pipe, a, v, e_in))
            assert nu <= 1.1 * eta + 1e-12

    def test_mirror_symmetry(self, fig_pipe):
        a = assign(2, fig_pipe.length, 8)
        fwd = errors.exact_errors(fig_pipe, a, 1.4, 0.4e9)
        bwd = errors.exact_errors(fig_pipe, a, -1.4, 0.4e9)
        assert fwd == pytest.approx(bwd, rel=1e-12)
        em_f = errors.estimate_model_error(fig_pipe, a, 1.4, 0.4e9)
        em_b = errors.estimate_model_error(fig_pipe, a, -1.4, 0.4e9)
        assert em_f == em_b


class TestAveragesAndPrediction:
    def test_average_all_zero(self):
        assert errors.average_error([0.0, 0.0, 0.0]) == 0.0

    def test_average_arithmetic(self):
        assert errors.average_error([1e-7, 3e-7]) == pytest.approx(2e-7)

    def test_average_empty_raises(self):
        with pytest.raises(ValueError):
            errors.average_error([])

    def test_average_monotone(self):
        base = [1e-7, 2e-7, 3e-7]
        bumped = [1e-7, 5e-7, 3e-7]
        assert errors.average_error(bumped) > errors.average_error(base)

    def test_prediction_factors(self):
        assert errors.predict_error_after_grid_change(0.8, "refine") == 0.2
        assert errors.predict_error_after_grid_change(0.2, "coarsen") == 0.8
        value = 0.37
        round_trip = errors.predict_error_after_grid_change(
            errors.predict_error_after_grid_change(value, "refine"), "coarsen")
        assert round_trip == pytest.approx(value, rel=1e-15)

    def test_prediction_rejects_negative(self):
        with pytest.raises(ValueError):
            errors.predict_error_after_grid_change(-1.0, "refine")


class TestReport:
    def test_total_is_sum(self):
        row = errors.PipeErrorRow("p", 2, 100.0, 1e-7, 2e-7)
        assert row.eta == pytest.approx(3e-7)

    def test_csv_shape(self, fig_pipe):
        rows = {
            "a": errors.PipeErrorRow("a", 1, 125.0, 0.0, 1e-8),
            "b": errors.PipeErrorRow("b", 3, 500.0, 2e-7, 0.0, 1e-7, 0.0, 1e-7),
        }
        report = errors.ErrorReport(rows, mode="estimate")
        text = report.to_csv()
        lines = text.strip().split("\n")
        assert lines[0].startswith("pipe,level,dx")
        assert len(lines) == 3
        assert report.average_eta == pytest.approx((1e-8 + 2e-7) / 2)

    def test_exact_average_requires_exact_rows(self):
        rows = {"a": errors.PipeErrorRow("a", 1, 125.0, 0.0, 1e-8)}
        report = errors.ErrorReport(rows, mode="estimate")
        with pytest.raises(ValueError):
            report.average_nu
