"""Gaussian-process Bayesian optimization of guidance weights.

The surrogate is a scikit-learn ``GaussianProcessRegressor`` with an ARD
squared-exponential kernel plus a white-noise term, refit by marginal-likelihood
maximization every iteration. Inputs are scaled to the unit box and outputs are
standardized (``normalize_y``). The acquisition is expected improvement for
minimization, maximized over a scrambled Sobol candidate set followed by an
L-BFGS-B polish of the best candidates.
"""

import logging
import warnings
from collections.abc import Callable, Sequence
from typing import NamedTuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from flowguide.errors import ObjectiveFailure

logger = logging.getLogger(__name__)

XI = 0.01
JITTER = 1e-6
SOBOL_EXPONENT = 11  # 2048 candidates
N_POLISH = 5

CFG_BOUNDS: tuple[tuple[float, float], ...] = ((1.0, 4.0), (1.0, 4.0))
AG_BOUNDS: tuple[tuple[float, float], ...] = ((1.0, 4.3), (1.0, 1.8))
MG_BOUNDS: tuple[tuple[float, float], ...] = ((1.0, 2.0),)
MG_BUDGET = (5, 10)  # initial points, EI acquisitions


class BOProblem(BaseModel):
    """Objective, box bounds and evaluation budget."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    objective: Callable[[np.ndarray], float] = Field(
        description="Maps a weight vector to the value being minimized (property MAE)"
    )
    bounds: list[tuple[float, float]] = Field(description="(low, high) per dimension")
    n_initial: int = Field(default=10, ge=2, description="Latin-hypercube initial points")
    n_iterations: int = Field(default=40, ge=0, description="EI acquisitions")
    seed: int = Field(default=0, description="Seed for design, candidates and GP restarts")

    @field_validator("bounds")
    @classmethod
    def _check_bounds(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        if not value:
            raise ValueError("At least one dimension is required")
        for low, high in value:
            if not (np.isfinite(low) and np.isfinite(high)) or high <= low:
                raise ValueError(f"Invalid bounds ({low}, {high})")
        return value

    @property
    def dim(self) -> int:
        return len(self.bounds)


class BOResult(NamedTuple):
    best_weights: np.ndarray
    best_value: float
    trace: pd.DataFrame


def expected_improvement(
    mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = XI
) -> np.ndarray:
    """EI for minimization; zero wherever ``sigma`` is zero."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    improvement = best - mu - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = improvement / sigma
        ei = improvement * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(sigma > 0, ei, 0.0)


class GPSurrogate:
    """GP over the unit-scaled weight box."""

    def __init__(self, bounds: Sequence[tuple[float, float]], seed: int = 0, fit_noise: bool = True):
        self.bounds = np.asarray(bounds, dtype=np.float64)
        dim = len(self.bounds)
        kernel = ConstantKernel(1.0, (1e-3, 1e3)) * RBF(
            length_scale=np.full(dim, 0.3), length_scale_bounds=(1e-2, 1e2)
        )
        if fit_noise:
            kernel = kernel + WhiteKernel(noise_level=1e-4, noise_level_bounds=(1e-10, 1e-1))
        self.gp = GaussianProcessRegressor(
            kernel=kernel,
            alpha=JITTER,
            normalize_y=True,
            n_restarts_optimizer=2,
            random_state=seed,
        )
        self.X: np.ndarray = np.zeros((0, dim))
        self.y: np.ndarray = np.zeros(0)

    def to_unit(self, weights: np.ndarray) -> np.ndarray:
        low, high = self.bounds[:, 0], self.bounds[:, 1]
        return (np.atleast_2d(weights) - low) / (high - low)

    def from_unit(self, unit: np.ndarray) -> np.ndarray:
        return qmc.scale(np.atleast_2d(unit), self.bounds[:, 0], self.bounds[:, 1])

    def fit(self, weights: np.ndarray, values: np.ndarray) -> "GPSurrogate":
        self.X = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        self.y = np.asarray(values, dtype=np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.gp.fit(self.to_unit(self.X), self.y)
        return self

    def predict(self, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.predict_unit(self.to_unit(weights))

    def predict_unit(self, unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = self.gp.predict(np.atleast_2d(unit), return_std=True)
        return mu, sigma

    @property
    def best(self) -> float:
        return float(self.y.min())

    def ei_unit(self, unit: np.ndarray, xi: float = XI) -> np.ndarray:
        mu, sigma = self.predict_unit(unit)
        return expected_improvement(mu, sigma, self.best, xi)


def ei(surrogate: GPSurrogate, candidate: np.ndarray, xi: float = XI) -> float:
    """Expected improvement of one weight vector under a fitted surrogate."""
    if len(surrogate.y) == 0:
        raise ValueError("Surrogate has no observations")
    return float(surrogate.ei_unit(surrogate.to_unit(candidate), xi)[0])


def propose(surrogate: GPSurrogate, seed: int) -> np.ndarray:
    """Maximize EI over Sobol candidates, then polish the best few with L-BFGS-B."""
    dim = len(surrogate.bounds)
    candidates = qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m=SOBOL_EXPONENT)
    scores = surrogate.ei_unit(candidates)
    best_x, best_score = candidates[int(np.argmax(scores))], float(scores.max())
    for start in candidates[np.argsort(-scores, kind="stable")[:N_POLISH]]:
        result = minimize(
            lambda u: -surrogate.ei_unit(u[None, :])[0],
            x0=start,
            bounds=[(0.0, 1.0)] * dim,
            method="L-BFGS-B",
        )
        if result.success and -float(result.fun) > best_score:
            best_x, best_score = np.clip(result.x, 0.0, 1.0), -float(result.fun)
    return surrogate.from_unit(best_x)[0]


def _evaluate(objective: Callable[[np.ndarray], float], weights: np.ndarray) -> float:
    try:
        value = float(objective(weights))
    except ObjectiveFailure:
        raise
    except Exception as e:
        raise ObjectiveFailure(weights, str(e)) from e
    if not np.isfinite(value):
        raise ObjectiveFailure(weights, f"non-finite objective value {value}")
    return value


def optimize(problem: BOProblem) -> BOResult:
    """Run the Latin-hypercube + EI loop and return the incumbent and trace.

    Args:
        problem: Objective, bounds, budget and seed

    Returns:
        BOResult with the incumbent weights, its value, and a trace with columns
        ``iteration, w1..wd, mae, incumbent_mae``

    Raises:
        ObjectiveFailure: If the objective raises or returns a non-finite value
    """
    dim = problem.dim
    surrogate = GPSurrogate(problem.bounds, seed=problem.seed)
    design = qmc.LatinHypercube(d=dim, seed=problem.seed).random(problem.n_initial)
    points = list(surrogate.from_unit(design))

    weights: list[np.ndarray] = []
    values: list[float] = []
    rows = []
    best_index = 0

    def record(w: np.ndarray) -> None:
        nonlocal best_index
        values.append(_evaluate(problem.objective, w))
        weights.append(np.asarray(w, dtype=np.float64))
        if values[-1] < values[best_index]:
            best_index = len(values) - 1
        rows.append(
            {
                "iteration": len(values) - 1,
                **{f"w{i + 1}": float(w[i]) for i in range(dim)},
                "mae": values[-1],
                "incumbent_mae": values[best_index],
            }
        )

    for w in points:
        record(w)
    for iteration in range(problem.n_iterations):
        surrogate.fit(np.stack(weights), np.array(values))
        record(propose(surrogate, seed=problem.seed + 1 + iteration))
        logger.debug(
            f"BO iteration {iteration + 1}/{problem.n_iterations}: "
            f"value={values[-1]:.4f}, incumbent={values[best_index]:.4f}"
        )

    logger.info(
        f"BO finished after {len(values)} evaluations: best {values[best_index]:.4f} "
        f"at {np.round(weights[best_index], 3).tolist()}"
    )
    return BOResult(weights[best_index], values[best_index], pd.DataFrame(rows))


def sensitivity(
    objective: Callable[[np.ndarray], float],
    weights: Sequence[float],
    step: float = 0.25,
    bounds: Sequence[tuple[float, float]] | None = None,
) -> np.ndarray:
    """``|d objective / d w_i|`` by symmetric differences, clipped to ``bounds``."""
    center = np.asarray(weights, dtype=np.float64)
    out = np.empty(len(center))
    for i in range(len(center)):
        up, down = center.copy(), center.copy()
        up[i] += step
        down[i] -= step
        if bounds is not None:
            up[i] = min(up[i], bounds[i][1])
            down[i] = max(down[i], bounds[i][0])
        out[i] = abs(_evaluate(objective, up) - _evaluate(objective, down)) / (up[i] - down[i])
    return out


def default_bounds(method: str, n_weights: int) -> list[tuple[float, float]]:
    """Search box per method: 1-D for mg, 2-D or 4-D (positions first) otherwise."""
    if method == "mg":
        return list(MG_BOUNDS)
    continuous, discrete = AG_BOUNDS if method == "ag" else CFG_BOUNDS
    if n_weights == 2:
        return [continuous, discrete]
    if n_weights == 4:
        return [continuous, discrete, discrete, discrete]
    raise ValueError(f"Expected 2 or 4 weights for {method}, got {n_weights}")
