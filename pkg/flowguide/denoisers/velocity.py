"""Closed-form Gaussian velocity fields for atom positions."""

import logging
from typing import Any

import numpy as np

from flowguide.errors import EmptyDataset, UnresolvedKey
from flowguide.toymol import Dataset

from .common import NO_BIN, ConditionKey, DenoiserBase, bins_to_array

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
MIN_BIN_COUNT = 5


def gaussian_posterior_means(
    x: np.ndarray, t: float, mean: np.ndarray, variance: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """``E[x1 | x_t = x]`` and ``E[x0 | x_t = x]`` for ``x0 ~ N(0, I)``, ``x1 ~ N(m, s2)``."""
    a, b = 1.0 - t, t
    v = a * a + b * b * variance
    residual = (x - b * mean) / v
    return mean + b * variance * residual, a * residual


def gaussian_velocity(
    x: np.ndarray, t: float, mean: np.ndarray, variance: np.ndarray
) -> np.ndarray:
    """Marginal velocity ``E[x1 - x0 | x_t = x]`` of the linear interpolant."""
    if t >= 1.0:
        raise ValueError(f"Velocity is undefined at t={t} >= 1")
    e1, e0 = gaussian_posterior_means(x, t, mean, variance)
    return e1 - e0


def velocity_mean_jacobian(t: float, variance: np.ndarray) -> np.ndarray:
    """Diagonal of d velocity / d mean, equal to ``(1 - t) / ((1 - t)^2 + t^2 s2)``."""
    a, b = 1.0 - t, t
    return a / (a * a + b * b * variance)


class GaussianVelocityModel(DenoiserBase):
    """Per-(n, bin) diagonal Gaussians over canonical-ordered centered positions.

    The ``(n, None)`` entry pools every bin. Conditional entries exist only for
    bins with at least ``min_bin_count`` molecules; other bins resolve to the
    pooled entry.
    """

    kind = "gaussian_velocity"

    means: dict[ConditionKey, np.ndarray]
    variances: dict[ConditionKey, np.ndarray]
    counts: dict[ConditionKey, int]

    def __init__(self, conditional: bool = True, variance_inflation: float = 0.0):
        self.conditional = conditional
        self.variance_inflation = variance_inflation
        self.means = {}
        self.variances = {}
        self.counts = {}

    def add_entry(self, key: ConditionKey, positions: np.ndarray, floor: float) -> None:
        variance = np.maximum(positions.var(axis=0), floor) * (1.0 + self.variance_inflation)
        self.means[key] = positions.mean(axis=0)
        self.variances[key] = variance
        self.counts[key] = len(positions)

    def resolve(self, n_atoms: int, bin_index: int | None) -> ConditionKey:
        if self.conditional and bin_index is not None and bin_index != NO_BIN:
            key = (n_atoms, int(bin_index))
            if key in self.means:
                return key
        key = (n_atoms, None)
        if key not in self.means:
            raise UnresolvedKey(f"No velocity entry for n_atoms={n_atoms}")
        return key

    def velocity(self, x: np.ndarray, t: float, key: ConditionKey) -> np.ndarray:
        resolved = self.resolve(*key)
        return gaussian_velocity(
            np.asarray(x, dtype=np.float64), t, self.means[resolved], self.variances[resolved]
        )

    def parameters(self, n_atoms: int, bins: Any, batch: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(B, 3n)`` means and variances for a batch of condition bins."""
        bins = bins_to_array(bins, batch)
        keys = [self.resolve(n_atoms, int(b)) for b in bins]
        return (
            np.stack([self.means[k] for k in keys]),
            np.stack([self.variances[k] for k in keys]),
        )

    def velocity_batch(
        self, x: np.ndarray, t: float, n_atoms: int, bins: Any
    ) -> np.ndarray:
        mean, variance = self.parameters(n_atoms, bins, len(x))
        return gaussian_velocity(x, t, mean, variance)

    def to_state(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "conditional": self.conditional,
            "variance_inflation": self.variance_inflation,
            "entries": [
                {
                    "n_atoms": key[0],
                    "bin": key[1],
                    "mean": self.means[key].tolist(),
                    "variance": self.variances[key].tolist(),
                    "count": self.counts[key],
                }
                for key in sorted(self.means, key=lambda k: (k[0], -1 if k[1] is None else k[1]))
            ],
        }

    @classmethod
    def from_state(
        cls, state: dict[str, Any], dataset: Dataset | None = None
    ) -> "GaussianVelocityModel":
        model = cls(
            conditional=state["conditional"],
            variance_inflation=state.get("variance_inflation", 0.0),
        )
        for entry in state["entries"]:
            key = (entry["n_atoms"], entry["bin"])
            model.means[key] = np.array(entry["mean"], dtype=np.float64)
            model.variances[key] = np.array(entry["variance"], dtype=np.float64)
            model.counts[key] = entry["count"]
        return model


def fit_velocity_model(
    dataset: Dataset,
    conditional: bool = True,
    min_bin_count: int = MIN_BIN_COUNT,
    variance_floor: float = VARIANCE_FLOOR,
    variance_inflation: float = 0.0,
) -> GaussianVelocityModel:
    """Fit sample means and floored variances per (n, bin) and per n.

    Args:
        dataset: Molecules in canonical atom order
        conditional: Whether to fit per-bin entries in addition to pooled ones
        min_bin_count: Bins with fewer molecules fall back to the pooled entry
        variance_floor: Lower bound on every fitted variance
        variance_inflation: Variances are multiplied by ``1 + variance_inflation``

    Returns:
        Fitted GaussianVelocityModel
    """
    if len(dataset) == 0:
        raise EmptyDataset("Cannot fit a velocity model on an empty dataset")
    model = GaussianVelocityModel(conditional=conditional, variance_inflation=variance_inflation)
    for n_atoms in dataset.atom_counts():
        stratum = dataset.stratum(n_atoms)
        model.add_entry((n_atoms, None), stratum.positions, variance_floor)
        if not conditional:
            continue
        for b in np.unique(stratum.bins):
            rows = stratum.positions[stratum.bins == b]
            if len(rows) >= min_bin_count:
                model.add_entry((n_atoms, int(b)), rows, variance_floor)
    logger.debug(
        f"Fitted {'conditional' if conditional else 'unconditional'} velocity model "
        f"with {len(model.means)} entries"
    )
    return model


def velocity(
    model: GaussianVelocityModel, x: np.ndarray, t: float, key: ConditionKey
) -> np.ndarray:
    return model.velocity(x, t, key)
