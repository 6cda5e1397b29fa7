"""Marking strategies against exhaustive-enumeration oracles."""

import itertools

import numpy as np
import pytest

from dhnopt import adaptive
from dhnopt.adaptive import (
    AdaptiveConfig,
    CoarsenBelowReference,
    apply_down_switch,
    apply_grid_change,
    check_feasible,
    check_termination_conditions,
    mark_coarsen,
    mark_downswitch,
    mark_refine,
    mark_upswitch,
    up_switch_candidate,
)
from dhnopt.errors import ErrorReport, PipeErrorRow
from dhnopt.pipes import PipeAssignment, PipeGrid


def min_cover_oracle(values, theta):
    """Smallest subset with Theta * sum(all) <= sum(subset)."""
    bound = theta * sum(values.values())
    best = None
    for r in range(len(values) + 1):
        for combo in itertools.combinations(sorted(values), r):
            if sum(values[p] for p in combo) >= bound:
                best = set(combo)
                break
        if best is not None:
            break
    return best


def max_under_oracle(values, theta):
    """Largest subset with sum(subset) <= Theta * sum(all)."""
    bound = theta * sum(values.values())
    best = set()
    for r in range(len(values), -1, -1):
        for combo in itertools.combinations(sorted(values), r):
            if sum(values[p] for p in combo) <= bound:
                return set(combo)
    return best


class TestMarkRefine:
    def test_documented_example(self):
        errs = {"a": 4.0, "b": 3.0, "c": 2.0, "d": 1.0}
        assert mark_refine(errs, 0.9) == {"a", "b", "c"}

    def test_all_zero_gives_empty(self):
        assert mark_refine({"a": 0.0, "b": 0.0}, 0.9) == set()

    def test_theta_near_one_takes_all_nonzero(self):
        errs = {"a": 3.0, "b": 2.0, "c": 1.0, "z": 0.0}
        assert mark_refine(errs, 0.999999) == {"a", "b", "c"}

    def test_matches_enumeration(self):
        rng = np.random.default_rng(5)
        for trial in range(200):
            n = int(rng.integers(1, 9))
            values = {f"p{i}": float(rng.integers(0, 10)) for i in range(n)}
            theta = float(rng.uniform(0.05, 0.95))
            greedy = mark_refine(values, theta)
            oracle = min_cover_oracle(values, theta)
            bound = theta * sum(values.values())
            assert len(greedy) == len(oracle)
            assert sum(values[p] for p in greedy) >= bound


class TestMarkCoarsen:
    def test_documented_example(self):
        errs = {"a": 4.0, "b": 3.0, "c": 2.0, "d": 1.0}
        assert mark_coarsen(errs, 0.45) == {"c", "d"}

    def test_all_zero_takes_all(self):
        errs = {"a": 0.0, "b": 0.0}
        assert mark_coarsen(errs, 0.45) == {"a", "b"}

    def test_theta_to_zero_keeps_only_zero_rows(self):
        errs = {"a": 1.0, "b": 0.0}
        assert mark_coarsen(errs, 1e-12) == {"b"}

    def test_matches_enumeration(self):
        rng = np.random.default_rng(6)
        for trial in range(200):
            n = int(rng.integers(1, 9))
            values = {f"p{i}": float(rng.integers(0, 10)) for i in range(n)}
            theta = float(rng.uniform(0.05, 0.95))
            greedy = mark_coarsen(values, theta)
            oracle = max_under_oracle(values, theta)
            bound = theta * sum(values.values())
            assert len(greedy) == len(oracle)
            assert sum(values[p] for p in greedy) <= bound + 1e-12


class TestMarkSwitching:
    def test_up_empty_candidate_set(self):
        assert mark_upswitch({}, 0.4) == set()

    def test_up_documented_example(self):
        eps = 1e-6
        decreases = {"a": 10 * eps, "b": 2 * eps}
        assert mark_upswitch(decreases, 0.4) == {"a"}

    def test_down_documented_example(self):
        eps = 1e-6
        increases = {"a": eps, "b": 2 * eps}  # A^{<tau eps} with tau=5
        assert mark_downswitch(increases, 0.2) == set()

    def test_down_zero_increases_marks_all(self):
        increases = {"a": 0.0, "b": 0.0}
        assert mark_downswitch(increases, 0.2) == {"a", "b"}


class TestSwitchRules:
    def test_up_one_level_when_worth_it(self):
        assert up_switch_candidate(3, 1e-5, 1e-6) == 2

    def test_up_jumps_to_one_otherwise(self):
        assert up_switch_candidate(3, 5e-7, 1e-6) == 1

    def test_up_at_top_stays(self):
        assert up_switch_candidate(1, 1.0, 1e-6) == 1

    @pytest.mark.parametrize("level, expected", [(1, 2), (2, 3), (3, 3)])
    def test_down_rule(self, level, expected):
        assert apply_down_switch(level) == expected

    def test_grid_changes(self):
        a = PipeAssignment(1, PipeGrid(100.0, 2))
        assert apply_grid_change(a, "refine").grid.n == 4
        assert apply_grid_change(
            PipeAssignment(1, PipeGrid(100.0, 4)), "coarsen").grid.n == 2
        with pytest.raises(CoarsenBelowReference):
            apply_grid_change(PipeAssignment(1, PipeGrid(100.0, 1)), "coarsen")


class TestFeasibilityAndDiagnostics:
    def report(self, eta):
        rows = {f"p{i}": PipeErrorRow(f"p{i}", 1, 1.0, 0.0, v)
                for i, v in enumerate(eta)}
        return ErrorReport(rows)

    def test_feasible_below(self):
        assert check_feasible(self.report([2e-7, 2e-7]), 1e-6)

    def test_feasible_at_equality(self):
        assert check_feasible(self.report([1e-6, 1e-6]), 1e-6)

    def test_infeasible_above(self):
        assert not check_feasible(self.report([1.1e-6, 1.1e-6]), 1e-6)

    def test_published_parameterization_margins(self):
        config = AdaptiveConfig()
        diag = check_termination_conditions(config, 18)
        assert diag["discretization_margin"] == pytest.approx(0.45)
        assert diag["discretization_ok"]
        assert diag["model_margin"] == pytest.approx(1.6 - 18.0)
        assert not diag["model_ok"]

    def test_larger_mu_satisfies_second(self):
        diag23 = check_termination_conditions(AdaptiveConfig(mu=23), 18)
        assert diag23["model_margin"] == pytest.approx(0.4 * 23 - 18.0)
        assert not diag23["model_ok"]
        diag120 = check_termination_conditions(AdaptiveConfig(mu=120), 18)
        assert diag120["model_ok"]

    def test_first_condition_with_tiny_coarsen_threshold(self):
        config = AdaptiveConfig(theta_coarsen=1e-9, mu=1)
        diag = check_termination_conditions(config, 5)
        assert diag["discretization_ok"]


class TestConfigValidation:
    def test_thresholds_in_unit_interval(self):
        with pytest.raises(ValueError):
            AdaptiveConfig(theta_refine=1.2)

    def test_tau_at_least_one(self):
        with pytest.raises(ValueError):
            AdaptiveConfig(tau=0.5)

    def test_error_mode_checked(self):
        with pytest.raises(ValueError):
            AdaptiveConfig(error_mode="guess")
