#!/usr/bin/env python3
"""Tests for expected improvement and the GP Bayesian-optimization loop."""

import numpy as np
import pytest
from pandas.testing import assert_frame_equal
from pydantic import ValidationError
from scipy.stats import norm

from flowguide.bayesopt import (
    CFG_BOUNDS,
    BOProblem,
    GPSurrogate,
    default_bounds,
    ei,
    expected_improvement,
    optimize,
    sensitivity,
)
from flowguide.errors import ObjectiveFailure


def quadratic(w: np.ndarray) -> float:
    return float((w[0] - 2.0) ** 2 + (w[1] - 1.5) ** 2)


class TestExpectedImprovement:
    def test_at_the_incumbent(self):
        # mu = best - xi gives z = 0, so EI = sigma * phi(0)
        value = expected_improvement(np.array([0.49]), np.array([0.3]), best=0.5, xi=0.01)
        assert value[0] == pytest.approx(0.3 * norm.pdf(0.0))

    def test_zero_sigma(self):
        value = expected_improvement(np.array([0.1, 0.2]), np.array([0.0, 0.0]), best=1.0)
        np.testing.assert_array_equal(value, 0.0)

    def test_monte_carlo(self):
        mu, sigma, best, xi = 0.5, 0.3, 0.6, 0.01
        y = np.random.default_rng(0).normal(mu, sigma, size=400_000)
        oracle = np.maximum(best - xi - y, 0.0).mean()
        value = expected_improvement(np.array([mu]), np.array([sigma]), best, xi)[0]
        assert value == pytest.approx(oracle, rel=1e-2)

    def test_nonnegative(self):
        mu = np.linspace(-2, 2, 41)
        assert (expected_improvement(mu, np.full_like(mu, 0.5), best=0.0) >= 0).all()

    def test_ei_needs_observations(self):
        with pytest.raises(ValueError, match="no observations"):
            ei(GPSurrogate(CFG_BOUNDS), np.array([2.0, 2.0]))

    def test_ei_on_fitted_surrogate(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(1.0, 4.0, size=(8, 2))
        surrogate = GPSurrogate(CFG_BOUNDS).fit(X, [quadratic(x) for x in X])
        assert ei(surrogate, np.array([2.0, 1.5])) >= 0.0


class TestOptimize:
    def test_finds_quadratic_minimum(self):
        result = optimize(BOProblem(objective=quadratic, bounds=list(CFG_BOUNDS)))
        np.testing.assert_allclose(result.best_weights, [2.0, 1.5], atol=0.15)
        assert result.best_value == pytest.approx(quadratic(result.best_weights))

    def test_trace(self):
        problem = BOProblem(objective=quadratic, bounds=list(CFG_BOUNDS), n_initial=4, n_iterations=3)
        trace = optimize(problem).trace
        assert list(trace.columns) == ["iteration", "w1", "w2", "mae", "incumbent_mae"]
        assert len(trace) == 7
        assert trace["incumbent_mae"].is_monotonic_decreasing
        assert trace["incumbent_mae"].iloc[-1] == trace["mae"].min()
        low, high = np.array(CFG_BOUNDS).T
        weights = trace[["w1", "w2"]].to_numpy()
        assert ((weights >= low) & (weights <= high)).all()

    def test_deterministic(self):
        problem = BOProblem(objective=quadratic, bounds=list(CFG_BOUNDS), n_initial=4, n_iterations=2)
        assert_frame_equal(optimize(problem).trace, optimize(problem).trace)

    def test_constant_objective_keeps_first_point(self):
        problem = BOProblem(
            objective=lambda w: 1.0, bounds=[(1.0, 2.0)], n_initial=3, n_iterations=2
        )
        result = optimize(problem)
        assert result.best_weights[0] == result.trace["w1"].iloc[0]
        assert result.best_value == 1.0

    def test_raising_objective(self):
        def boom(w):
            raise RuntimeError("sampler crashed")

        with pytest.raises(ObjectiveFailure, match="sampler crashed") as info:
            optimize(BOProblem(objective=boom, bounds=[(1.0, 2.0)], n_initial=2, n_iterations=0))
        assert len(info.value.weights) == 1

    def test_nan_objective(self):
        problem = BOProblem(
            objective=lambda w: float("nan"), bounds=[(1.0, 2.0)], n_initial=2, n_iterations=0
        )
        with pytest.raises(ObjectiveFailure, match="non-finite"):
            optimize(problem)


class TestProblem:
    @pytest.mark.parametrize("bounds", [[], [(2.0, 1.0)], [(1.0, float("inf"))]])
    def test_invalid_bounds(self, bounds):
        with pytest.raises(ValidationError):
            BOProblem(objective=quadratic, bounds=bounds)

    def test_default_bounds(self):
        assert default_bounds("mg", 2) == [(1.0, 2.0)]
        assert default_bounds("ag", 2) == [(1.0, 4.3), (1.0, 1.8)]
        assert default_bounds("cfg", 4) == [(1.0, 4.0)] * 4
        with pytest.raises(ValueError):
            default_bounds("cfg", 3)


def test_sensitivity_of_linear_objective():
    def linear(w):
        return 3.0 * w[0] + 0.5 * w[1]

    np.testing.assert_allclose(sensitivity(linear, [2.0, 2.0]), [3.0, 0.5])
    clipped = sensitivity(linear, [1.0, 1.0], bounds=list(CFG_BOUNDS))
    np.testing.assert_allclose(clipped, [3.0, 0.5])
