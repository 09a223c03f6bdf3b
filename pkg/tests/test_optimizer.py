"""
Tests for contrast maximisation and parameter sweeps.

Most tests replace the contrast evaluation with a smooth analytic landscape
so the Nelder-Mead driver, budget accounting, restarts and warm starts can
be checked in milliseconds.
"""

import pytest
import numpy as np
import math
import sys
import os
from types import SimpleNamespace

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import algorithms.optimizer as optimizer
from algorithms.analysis import contrast_D, switching_times
from algorithms.optimizer import (
    FREE_PARAMETERS,
    OptimizationSpec,
    _warm_start,
    apply_swept_value,
    default_bounds,
    maximize_contrast,
    sweep,
)
from algorithms.switch_model import table1_params
from core.errors import InvalidArgumentError, SolverError


@pytest.fixture
def landscape(monkeypatch):
    """Peak D = 0.9 at g_a = 2, Δ = 1; counts calls."""
    calls = []

    def fake_contrast(point, search=True):
        calls.append(point)
        D = 0.9 - (point.g_a - 2.0) ** 2 - 0.01 * (point.delta_cap - 1.0) ** 2
        return SimpleNamespace(D=D, theta_a_star=point.theta_a)

    monkeypatch.setattr(optimizer, "contrast_D", fake_contrast)
    return calls


class TestOptimizationSpec:
    """Test suite for optimizer settings."""

    @pytest.mark.unit
    def test_default_bounds_scale_with_g_b(self):
        """Test that default bounds follow g_b."""
        bounds = default_bounds(table1_params(g_b=20.0))

        assert bounds["theta_a"] == (-40.0, 20.0), "Θa bounds are [-2 g_b, g_b]"
        assert bounds["delta_small"] == (0.0, 40.0), "δ bounds are [0, 2 g_b]"

    @pytest.mark.unit
    def test_unknown_free_parameter(self):
        """Test that only the operating-point parameters may be free."""
        with pytest.raises(InvalidArgumentError):
            OptimizationSpec(free=("kappa_a",))

    @pytest.mark.unit
    def test_init_outside_bounds_is_projected(self):
        """Test that the starting point is clipped into the box."""
        spec = OptimizationSpec(free=("g_a",), init={"g_a": 500.0})
        lo, hi, x0 = spec.resolve(table1_params())

        assert x0[0] == hi[0], "Starting point should be projected onto the upper bound"

    @pytest.mark.unit
    def test_dark_band(self):
        """Test the Raman dark-band predicate."""
        spec = OptimizationSpec(dark_band=0.05)

        assert spec.in_dark_band(table1_params(theta_a=-11.57)), "|Θa + δ| = 0.02 is inside"
        assert not spec.in_dark_band(table1_params()), "The operating point is far from the band"


class TestMaximizeContrast:
    """Test suite for the Nelder-Mead driver."""

    @pytest.mark.unit
    def test_finds_peak(self, landscape):
        """Test convergence onto the analytic maximum."""
        spec = OptimizationSpec(free=("g_a", "delta_cap"), init={"g_a": 1.0, "delta_cap": 0.0}, budget=400)
        result = maximize_contrast(table1_params(), spec, seed=1)

        assert abs(result.D - 0.9) < 1e-3, "Peak value should be reached"
        assert abs(result.params.g_a - 2.0) < 0.05, "g_a optimum"
        assert result.evaluations == len(result.trace) == len(landscape), "Every evaluation is traced"

    @pytest.mark.unit
    def test_budget_is_respected(self, landscape):
        """Test that the evaluation budget caps the search and clears the converged flag."""
        spec = OptimizationSpec(free=("g_a", "delta_cap"), init={"g_a": 1.0, "delta_cap": 0.0}, budget=5)
        result = maximize_contrast(table1_params(), spec, seed=1)

        assert result.evaluations <= 5, "No more evaluations than the budget"
        assert not result.converged, "Exhausted budget is not convergence"

    @pytest.mark.unit
    def test_never_worse_than_start(self, landscape):
        """Test that the reported D is at least the starting D."""
        spec = OptimizationSpec(free=("g_a",), init={"g_a": 1.5}, budget=30)
        result = maximize_contrast(table1_params(), spec, seed=3)

        assert result.D >= result.trace["D"].iloc[0], "Best-so-far includes the starting point"

    @pytest.mark.unit
    def test_seed_determinism(self, landscape):
        """Test that the same seed gives the same trace."""
        spec = OptimizationSpec(free=("g_a", "delta_cap"), init={"g_a": 1.0, "delta_cap": 0.0}, budget=80)
        first = maximize_contrast(table1_params(), spec, seed=4)
        second = maximize_contrast(table1_params(), spec, seed=4)

        assert first.trace.equals(second.trace), "Optimiser runs are reproducible"

    @pytest.mark.unit
    def test_dark_band_scores_zero(self, landscape):
        """Test that dark-band points are scored zero without evaluating D."""
        params = table1_params(theta_a=-11.5916)
        spec = OptimizationSpec(free=("theta_a",), bounds={"theta_a": (-11.6, -11.56)}, budget=10, restarts=0)
        result = maximize_contrast(params, spec)

        assert result.D == 0.0, "Dark-band points have no contrast"
        assert landscape == [], "The contrast evaluation is skipped inside the band"

    @pytest.mark.unit
    def test_searched_theta_a_is_returned(self, monkeypatch):
        """Test that the Θa found by the line search is the one reported and traced."""
        def searched(point, search=True):
            assert search, "Θa is not free, so each evaluation searches it"
            D = 0.9 - (point.g_a - 2.0) ** 2
            return SimpleNamespace(D=D, theta_a_star=0.25 + 0.01 * point.g_a)

        monkeypatch.setattr(optimizer, "contrast_D", searched)
        spec = OptimizationSpec(free=("g_a",), init={"g_a": 1.0}, budget=100, restarts=0)
        result = maximize_contrast(table1_params(theta_a=0.5), spec, seed=2)

        assert list(result.trace.columns) == ["g_a", "theta_a", "D"], "The searched Θa is traced"
        assert math.isclose(result.params.theta_a, 0.25 + 0.01 * result.params.g_a), \
            "Returned params carry the searched Θa of the best point"
        assert result.optimum()["theta_a"] == result.params.theta_a, "The optimum reports the same Θa"

    @pytest.mark.unit
    def test_searched_theta_a_in_dark_band_scores_zero(self, monkeypatch):
        """Test that a line search ending on the dark resonance is scored zero."""
        def dark(point, search=True):
            return SimpleNamespace(D=0.95, theta_a_star=-point.delta_small)

        monkeypatch.setattr(optimizer, "contrast_D", dark)
        spec = OptimizationSpec(free=("g_a",), budget=6, restarts=0)
        result = maximize_contrast(table1_params(), spec)

        assert result.D == 0.0, "The band applies to the searched Θa"
        assert np.allclose(result.trace["theta_a"], -11.5916), "Trace records where the search ended"

    @pytest.mark.unit
    def test_solver_failure_scores_zero(self, monkeypatch):
        """Test that a failing evaluation is logged and scored zero."""
        def failing(point, search=True):
            raise SolverError("no convergence")

        monkeypatch.setattr(optimizer, "contrast_D", failing)
        result = maximize_contrast(table1_params(), OptimizationSpec(free=("g_a",), budget=5, restarts=0))

        assert result.D == 0.0, "Failures count as D = 0"


TABLE1_OPTIMUM = {"theta_a": -0.0915, "g_a": 1.3784, "delta_small": 11.5916, "delta_cap": 2.8520}


def _small_cutoffs(**overrides):
    """Operating point at cutoffs (3, 4), enough for the weak drives used here."""
    return table1_params(n_a=3, n_b=4, **overrides)


class TestRealModel:
    """Test suite for the optimizer on the full switch model."""

    @pytest.mark.integration
    def test_returned_point_reproduces_D(self):
        """Test that D re-evaluated at the returned params matches the reported D."""
        params = _small_cutoffs(theta_a=0.5)
        spec = OptimizationSpec(free=("g_a", "delta_small", "delta_cap"), budget=3)
        result = maximize_contrast(params, spec, seed=0)

        assert result.params.theta_a != 0.5, "The searched Θa replaces the starting one"
        assert contrast_D(result.params, search=False).D == pytest.approx(result.D, abs=1e-9), \
            "Reported D belongs to the returned operating point"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_recovers_delta_optimum(self):
        """Test that a detuned δ is pulled back to within 20% of g_b."""
        start = _small_cutoffs(delta_small=10.5)
        spec = OptimizationSpec(free=("delta_small",), init={"delta_small": 10.5}, budget=30, restarts=0)
        result = maximize_contrast(start, spec, seed=0)

        assert abs(result.params.delta_small - start.g_b) <= 0.2 * start.g_b, "δ lands near g_b"
        assert result.D >= result.trace["D"].iloc[0], "Optimisation never loses contrast"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_perturbed_start_recovers_contrast(self):
        """Test that a start 10% away from the operating point climbs back to D >= 0.90."""
        init = {"g_a": 0.9 * TABLE1_OPTIMUM["g_a"], "delta_small": 1.1 * TABLE1_OPTIMUM["delta_small"],
                "delta_cap": 0.9 * TABLE1_OPTIMUM["delta_cap"]}
        spec = OptimizationSpec(free=("g_a", "delta_small", "delta_cap"), init=init, budget=60, restarts=0)
        result = maximize_contrast(_small_cutoffs(theta_a=1.1 * TABLE1_OPTIMUM["theta_a"]), spec, seed=0)

        assert result.D >= 0.90, f"Recovered contrast {result.D:.4f} should reach 0.90"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_contrast_grows_with_g_b(self):
        """Test that the optimised contrast increases strictly along g_b = 5, 10, 20."""
        spec = OptimizationSpec(budget=150, restarts=1)
        frame = sweep(_small_cutoffs(), "g_b", [5.0, 10.0, 20.0], spec, with_switching_times=False)

        assert (frame["error"] == "").all(), "Every sweep point optimises"
        assert frame["D"].is_monotonic_increasing and frame["D"].is_unique, \
            f"D should grow strictly with g_b: {list(frame['D'])}"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_doubling_kappa_lowers_contrast(self):
        """Test that doubling both cavity decay rates at g_b = 10 lowers the optimum."""
        spec = OptimizationSpec(init=TABLE1_OPTIMUM, budget=150, restarts=1)
        base = maximize_contrast(_small_cutoffs(), spec, seed=0)
        lossy = maximize_contrast(apply_swept_value(_small_cutoffs(), "kappa", 2.0), spec, seed=0)

        assert lossy.D < base.D, f"κ = 2 gives {lossy.D:.4f}, κ = 1 gives {base.D:.4f}"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_contrast_flat_in_g_a(self):
        """Test that re-optimised D changes by less than 0.05 over ±30% of g_a."""
        spec = OptimizationSpec(free=("delta_small", "delta_cap"), init=TABLE1_OPTIMUM, budget=30, restarts=0)
        grid = [0.7 * TABLE1_OPTIMUM["g_a"], TABLE1_OPTIMUM["g_a"], 1.3 * TABLE1_OPTIMUM["g_a"]]
        frame = sweep(_small_cutoffs(), "g_a", grid, spec, with_switching_times=False)

        assert frame["D"].max() - frame["D"].min() < 0.05, f"D over g_a: {list(frame['D'])}"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_sweep_rate_relation(self):
        """Test |D - T_off/(T_on + T_off)| <= 0.03 on every sweep point with D >= 0.9."""
        spec = OptimizationSpec(init=TABLE1_OPTIMUM, budget=80, restarts=0)
        frame = sweep(_small_cutoffs(), "g_b", [10.0, 20.0], spec)
        good = frame[frame["D"] >= 0.9]

        assert len(good) >= 1, "The operating point itself reaches D >= 0.9"
        for _, row in good.iterrows():
            assert abs(row["D"] - row["rate_relation"]) <= 0.03, f"Rate relation at g_b = {row['g_b']}"
            assert math.isclose(row["rate_relation"], row["T_off"] / (row["T_on"] + row["T_off"])), \
                "rate_relation column matches the switching times"
            check = switching_times(_small_cutoffs(g_b=row["g_b"]).replace(
                **{name: row[name] for name in FREE_PARAMETERS}))
            assert math.isclose(check.T_on, row["T_on"], rel_tol=1e-3), "T_on belongs to the reported point"


class TestSweep:
    """Test suite for parameter sweeps."""

    @pytest.mark.unit
    def test_kappa_rescales_drives(self):
        """Test that the kappa pseudo-parameter keeps the incident flux fixed."""
        params = apply_swept_value(table1_params(), "kappa", 4.0)

        assert params.kappa_a == params.kappa_b == 4.0, "Both cavity rates are set"
        assert math.isclose(params.eps_b, 2.0 * math.sqrt(0.1)), "E scales with sqrt(κ)"

    @pytest.mark.unit
    def test_gamma_b_cannot_be_swept(self):
        """Test that the unit rate is not sweepable."""
        with pytest.raises(InvalidArgumentError):
            apply_swept_value(table1_params(), "gamma_b", 2.0)

    @pytest.mark.unit
    def test_warm_start_scales_with_g_b(self):
        """Test that g_b sweeps rescale the previous optimum."""
        warm = _warm_start({"g_a": 1.0, "theta_a": -0.1}, "g_b", 10.0, 20.0)

        assert warm == {"g_a": 2.0, "theta_a": -0.2}, "Optimum positions scale with g_b"
        assert _warm_start({"g_a": 1.0}, "kappa", 1.0, 2.0) == {"g_a": 1.0}, "Other sweeps reuse it as is"

    @pytest.mark.unit
    def test_sweep_rows(self, landscape):
        """Test one row per grid value with the optimum filled in."""
        spec = OptimizationSpec(free=("g_a",), init={"g_a": 1.0}, budget=200, restarts=0)
        frame = sweep(table1_params(), "g_b", [5.0, 10.0], spec, with_switching_times=False)

        assert list(frame["g_b"]) == [5.0, 10.0], "Rows follow the grid"
        assert (frame["error"] == "").all(), "No failures"
        assert np.allclose(frame["g_a"], 2.0, atol=0.05), "Each point reaches the analytic optimum"
        assert frame["T_on"].isna().all(), "Switching times skipped on request"

    @pytest.mark.unit
    def test_sweep_over_an_operating_parameter(self, landscape):
        """Test that sweeping g_a keeps one g_a column holding the grid values."""
        spec = OptimizationSpec(free=("delta_cap",), budget=10, restarts=0)
        frame = sweep(table1_params(), "g_a", [1.0, 2.0], spec, with_switching_times=False)

        assert frame.columns.is_unique, "No duplicated columns"
        assert list(frame["g_a"]) == [1.0, 2.0], "The swept column holds the grid"
        assert frame["D"].iloc[1] > frame["D"].iloc[0], "The landscape peaks at g_a = 2"

    @pytest.mark.unit
    def test_sweep_records_failures(self, landscape):
        """Test that an invalid sweep point is recorded and the sweep carries on."""
        spec = OptimizationSpec(free=("g_a",), budget=10, restarts=0)
        frame = sweep(table1_params(), "kappa", [-1.0, 1.0], spec, with_switching_times=False)

        assert frame["error"].iloc[0] != "", "Negative κ should fail"
        assert math.isnan(frame["D"].iloc[0]), "Failed row has no D"
        assert frame["error"].iloc[1] == "", "Next point still runs"

    @pytest.mark.unit
    def test_grid_must_increase(self):
        """Test that sweep grids must be strictly increasing."""
        with pytest.raises(InvalidArgumentError):
            sweep(table1_params(), "g_b", [10.0, 5.0])
