"""Exact noisy-state property classifier used by predictor guidance."""

from typing import Any

import numpy as np

from flowguide.toymol import Dataset

from .common import DenoiserBase, MatchCounts, StratumIndex


class NoisyStateClassifier(DenoiserBase):
    """p(bin | revealed tokens, n) as bin frequencies of the matching molecules.

    ``index`` may be shared with an :class:`EmpiricalPosterior` fitted on the
    same dataset so the one-hot strata are built once.
    """

    kind = "noisy_state_classifier"

    def __init__(self, dataset: Dataset, index: StratumIndex | None = None):
        self.dataset = dataset
        self.index = index or StratumIndex(dataset)

    def classify(self, states: np.ndarray, n_atoms: int) -> np.ndarray:
        states = np.atleast_2d(states)
        match = self.index.match(n_atoms, states)
        bins = self.dataset.stratum(n_atoms).bins
        per_bin = np.zeros((len(bins), self.dataset.n_bins), dtype=np.float32)
        per_bin[np.arange(len(bins)), bins] = 1.0
        counts = (match @ per_bin).astype(np.float64)
        totals = counts.sum(axis=1, keepdims=True)
        uniform = np.full_like(counts, 1.0 / self.dataset.n_bins)
        return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)

    def ratios(self, n_atoms: int, states: np.ndarray, bins: Any) -> np.ndarray:
        """Flat ``(B, n_categories)`` ratios ``p(bin | slot revealed) / p(bin | state)``."""
        return predictor_ratios(self.index.counts(n_atoms, np.atleast_2d(states), bins))

    def to_state(self) -> dict[str, Any]:
        return {"kind": self.kind}

    @classmethod
    def from_state(cls, state: dict[str, Any], dataset: Dataset) -> "NoisyStateClassifier":
        return cls(dataset)


def classify(
    classifier: NoisyStateClassifier, revealed: np.ndarray, n_atoms: int
) -> np.ndarray:
    return classifier.classify(revealed, n_atoms)


def predictor_ratios(match: MatchCounts) -> np.ndarray:
    """Per-category ``p(y | slot revealed as a) / p(y | x_t)`` from exact match counts.

    Categories that no matching molecule carries, and rows without any molecule
    in the target bin, get a neutral ratio of 1.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        after = np.where(match.counts > 0, match.cond_counts / match.counts, 1.0)
        before = np.where(match.totals > 0, match.cond_totals / match.totals, 0.0)
        ratios = np.where(before[:, None] > 0, after / before[:, None], 1.0)
    return ratios
