"""Common interfaces and the exact match index shared by the tabular denoisers."""

from abc import ABC, abstractmethod
from typing import Any, ClassVar, NamedTuple

import numpy as np

from flowguide.flowcore import slot_layout
from flowguide.toymol import Dataset

# Batched condition arrays use -1 for the unconditional key.
NO_BIN = -1

ConditionKey = tuple[int, int | None]


def bins_to_array(bins: Any, batch: int) -> np.ndarray:
    """Broadcast ``None`` / scalar / array bins to a ``(batch,)`` int array."""
    if bins is None:
        return np.full(batch, NO_BIN, dtype=np.int64)
    array = np.asarray(bins, dtype=np.int64)
    if array.ndim == 0:
        return np.full(batch, int(array), dtype=np.int64)
    return array


class DenoiserBase(ABC):
    """Base interface for fitted stand-ins of the denoising networks.

    Subclasses expose a ``kind`` tag and round-trip through plain JSON-able
    dictionaries so model bundles can be persisted without pickling.
    """

    kind: ClassVar[str]

    @abstractmethod
    def to_state(self) -> dict[str, Any]:
        """Serialize fitted parameters to a JSON-compatible dictionary.

        Returns:
            Dictionary with at least a ``kind`` entry
        """
        ...

    @classmethod
    @abstractmethod
    def from_state(cls, state: dict[str, Any], dataset: Dataset) -> "DenoiserBase":
        """Rebuild a model from :meth:`to_state` output.

        Args:
            state: Serialized parameters
            dataset: Dataset the model was fitted on

        Returns:
            Reconstructed model instance
        """
        ...


class MatchCounts(NamedTuple):
    """Category counts over dataset molecules consistent with a revealed state.

    Attributes:
        counts: ``(B, n_categories)`` counts over the full match set
        totals: ``(B,)`` size of the full match set
        cond_counts: counts restricted to each row's condition bin
        cond_totals: size of the restricted match set
    """

    counts: np.ndarray
    totals: np.ndarray
    cond_counts: np.ndarray
    cond_totals: np.ndarray


class StratumIndex:
    """One-hot token matrices per atom count for exact dataset matching.

    A dataset molecule matches a partially masked state when it agrees with every
    revealed slot. With ``R`` the one-hot of revealed tokens and ``O`` the
    molecule one-hots, that is ``R @ O.T == number of revealed slots``.
    """

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._onehots: dict[int, np.ndarray] = {}

    def onehot(self, n_atoms: int) -> np.ndarray:
        if n_atoms not in self._onehots:
            stratum = self.dataset.stratum(n_atoms)
            self._onehots[n_atoms] = slot_layout(n_atoms).onehot(stratum.tokens)
        return self._onehots[n_atoms]

    def match(self, n_atoms: int, states: np.ndarray) -> np.ndarray:
        """``(B, N)`` float32 indicator of matching stratum molecules."""
        layout = slot_layout(n_atoms)
        states = np.atleast_2d(states)
        revealed = layout.onehot(states)
        n_revealed = revealed.sum(axis=1, keepdims=True)
        return (revealed @ self.onehot(n_atoms).T == n_revealed).astype(np.float32)

    def counts(self, n_atoms: int, states: np.ndarray, bins: Any = None) -> MatchCounts:
        states = np.atleast_2d(states)
        onehot = self.onehot(n_atoms)
        match = self.match(n_atoms, states)
        counts = (match @ onehot).astype(np.float64)
        totals = match.sum(axis=1).astype(np.float64)
        bins = bins_to_array(bins, len(states))
        in_bin = self.dataset.stratum(n_atoms).bins[None, :] == bins[:, None]
        cond_match = match * in_bin
        return MatchCounts(
            counts=counts,
            totals=totals,
            cond_counts=(cond_match @ onehot).astype(np.float64),
            cond_totals=cond_match.sum(axis=1).astype(np.float64),
        )

    def marginal_counts(self, n_atoms: int) -> np.ndarray:
        return self.onehot(n_atoms).sum(axis=0).astype(np.float64)
