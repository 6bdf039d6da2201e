"""Exact empirical denoising posteriors over the discrete modalities."""

import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from flowguide.flowcore import MODALITIES, SlotLayout, slot_layout
from flowguide.toymol import Dataset, ToyMolecule

from .common import NO_BIN, DenoiserBase, MatchCounts, StratumIndex, bins_to_array

logger = logging.getLogger(__name__)

NLL_FLOOR = 1e-6


class EmpiricalPosterior(DenoiserBase):
    """p(x1 | x_t, n, bin) as frequencies over matching dataset molecules.

    Fallback chain for an empty match set: conditional -> unconditional ->
    per-slot marginals of the n-stratum -> uniform (empty stratum).
    ``smoothing`` adds a pseudo-count to every category after the fallback.
    """

    kind = "empirical_posterior"

    def __init__(self, dataset: Dataset, smoothing: float = 0.0):
        if smoothing < 0:
            raise ValueError(f"smoothing must be >= 0, got {smoothing}")
        self.dataset = dataset
        self.smoothing = smoothing
        self.index = StratumIndex(dataset)

    def _normalize(
        self, layout: SlotLayout, counts: np.ndarray, totals: np.ndarray, n_atoms: int
    ) -> np.ndarray:
        counts = counts.copy()
        totals = totals.copy()
        empty = totals <= 0
        if empty.any():
            marginal = self.index.marginal_counts(n_atoms)
            counts[empty] = marginal
            totals[empty] = len(self.index.onehot(n_atoms))
            logger.debug(f"{int(empty.sum())} rows fell back to stratum marginals")
        columns = np.repeat(layout.alphabet, layout.alphabet)
        denominator = totals[:, None] + self.smoothing * columns[None, :]
        populated = denominator > 0
        probs = (counts + self.smoothing) / np.where(populated, denominator, 1.0)
        # Empty stratum without smoothing
        return np.where(populated, probs, 1.0 / columns[None, :])

    def from_counts(
        self, n_atoms: int, match: MatchCounts, conditional: bool
    ) -> np.ndarray:
        layout = slot_layout(n_atoms)
        if not conditional:
            return self._normalize(layout, match.counts, match.totals, n_atoms)
        no_match = match.cond_totals <= 0
        counts = np.where(no_match[:, None], match.counts, match.cond_counts)
        totals = np.where(no_match, match.totals, match.cond_totals)
        if no_match.any():
            logger.debug(f"{int(no_match.sum())} rows fell back to unconditional matches")
        return self._normalize(layout, counts, totals, n_atoms)

    def probabilities(self, n_atoms: int, states: np.ndarray, bins: Any = None) -> np.ndarray:
        """Flat ``(B, n_categories)`` posteriors for every slot of ``states``.

        ``bins`` of ``None`` (or -1 entries) selects the unconditional posterior.
        """
        states = np.atleast_2d(states)
        bins = bins_to_array(bins, len(states))
        match = self.index.counts(n_atoms, states, bins)
        cond = self.from_counts(n_atoms, match, conditional=True)
        if (bins == NO_BIN).any():
            uncond = self.from_counts(n_atoms, match, conditional=False)
            cond = np.where((bins == NO_BIN)[:, None], uncond, cond)
        return cond

    def conditional_pair(
        self, n_atoms: int, states: np.ndarray, bins: Any
    ) -> tuple[np.ndarray, np.ndarray, MatchCounts]:
        """(unconditional, conditional) posteriors sharing one match computation."""
        states = np.atleast_2d(states)
        match = self.index.counts(n_atoms, states, bins_to_array(bins, len(states)))
        return (
            self.from_counts(n_atoms, match, conditional=False),
            self.from_counts(n_atoms, match, conditional=True),
            match,
        )

    def posterior(
        self,
        revealed: dict[str, np.ndarray],
        n_atoms: int,
        slot: tuple[str, int],
        bin_index: int | None = None,
    ) -> np.ndarray:
        """Categorical over the alphabet of one masked slot."""
        layout = slot_layout(n_atoms)
        state = np.concatenate([np.asarray(revealed[m]) for m in MODALITIES])[None, :]
        modality, index = slot
        flat_slot = layout.slices[modality].start + index
        if state[0, flat_slot] != layout.mask_tokens[flat_slot]:
            raise ValueError(f"Slot {slot} is not masked")
        probs = self.probabilities(n_atoms, state, bin_index)
        start = int(layout.offsets[flat_slot])
        return probs[0, start : start + int(layout.alphabet[flat_slot])]

    def to_state(self) -> dict[str, Any]:
        return {"kind": self.kind, "smoothing": self.smoothing}

    @classmethod
    def from_state(cls, state: dict[str, Any], dataset: Dataset) -> "EmpiricalPosterior":
        return cls(dataset, smoothing=state.get("smoothing", 0.0))


def posterior(
    model: EmpiricalPosterior,
    revealed: dict[str, np.ndarray],
    n_atoms: int,
    slot: tuple[str, int],
    bin_index: int | None = None,
) -> np.ndarray:
    return model.posterior(revealed, n_atoms, slot, bin_index)


def held_out_nll(model: EmpiricalPosterior, molecules: Sequence[ToyMolecule]) -> float:
    """Mean per-slot negative log-likelihood of clean tokens under the all-masked posterior."""
    total, n_slots = 0.0, 0
    for n_atoms in sorted({m.n_atoms for m in molecules}):
        layout = slot_layout(n_atoms)
        probs = model.probabilities(n_atoms, layout.all_masked(1))[0]
        group = [m for m in molecules if m.n_atoms == n_atoms]
        tokens = np.stack([m.to_codes() for m in group])
        picked = probs[layout.offsets[None, :] + tokens]
        total += float(-np.log(np.maximum(picked, NLL_FLOOR)).sum())
        n_slots += tokens.size
    return total / n_slots
