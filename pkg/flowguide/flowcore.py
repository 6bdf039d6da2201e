"""Time grids, interpolants and masking marginals shared by both flows."""

from functools import lru_cache
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from flowguide.toymol import (
    MASK_ATOM,
    MASK_BOND,
    MASK_CHARGE,
    N_ATOM_TYPES,
    N_BOND_ORDERS,
    N_CHARGES,
    n_bond_slots,
)

Modality = Literal["atom_types", "charges", "bonds"]
MODALITIES: tuple[Modality, ...] = ("atom_types", "charges", "bonds")
ALPHABET_SIZES: dict[str, int] = {
    "atom_types": N_ATOM_TYPES,
    "charges": N_CHARGES,
    "bonds": N_BOND_ORDERS,
}
MASK_TOKENS: dict[str, int] = {
    "atom_types": MASK_ATOM,
    "charges": MASK_CHARGE,
    "bonds": MASK_BOND,
}


def slot_count(modality: str, n_atoms: int) -> int:
    return n_bond_slots(n_atoms) if modality == "bonds" else n_atoms


class TimeGrid(BaseModel):
    """Evenly spaced integration times ``t_k = k / steps`` for ``k < steps``.

    The last evaluated time is ``1 - dt``; each Euler step moves from ``t_k``
    to ``t_k + dt``, so rate denominators ``1 - t`` never reach zero.
    """

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=100, ge=2, description="Number of Euler steps")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps, dtype=np.float64) / self.steps


class MaskedSequence(NamedTuple):
    """Token codes of one discrete modality, possibly containing mask tokens."""

    tokens: np.ndarray
    modality: Modality

    @property
    def mask_token(self) -> int:
        return MASK_TOKENS[self.modality]

    @property
    def is_masked(self) -> np.ndarray:
        return self.tokens == self.mask_token

    def check_length(self, n_atoms: int) -> None:
        expected = slot_count(self.modality, n_atoms)
        if self.tokens.shape[-1] != expected:
            raise ValueError(
                f"{self.modality} expects {expected} slots for n={n_atoms}, "
                f"got {self.tokens.shape[-1]}"
            )


class SlotLayout:
    """Concatenated slot order (atom types | charges | bonds) for one atom count.

    ``offsets`` index into the one-hot category axis, which stacks each slot's
    alphabet back to back.
    """

    def __init__(self, n_atoms: int):
        self.n_atoms = n_atoms
        counts = [slot_count(m, n_atoms) for m in MODALITIES]
        self.slices: dict[str, slice] = {}
        start = 0
        for modality, count in zip(MODALITIES, counts, strict=True):
            self.slices[modality] = slice(start, start + count)
            start += count
        self.n_slots = start
        self.alphabet = np.concatenate(
            [np.full(c, ALPHABET_SIZES[m]) for m, c in zip(MODALITIES, counts, strict=True)]
        ).astype(np.int64)
        self.mask_tokens = np.concatenate(
            [np.full(c, MASK_TOKENS[m]) for m, c in zip(MODALITIES, counts, strict=True)]
        ).astype(np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.alphabet)[:-1]]).astype(
            np.int64
        )
        self.n_categories = int(self.alphabet.sum())
        self.category_slices: dict[str, slice] = {
            m: slice(
                int(self.offsets[self.slices[m].start]),
                int(self.offsets[self.slices[m].start])
                + slot_count(m, n_atoms) * ALPHABET_SIZES[m],
            )
            for m in MODALITIES
        }

    def all_masked(self, batch: int) -> np.ndarray:
        return np.tile(self.mask_tokens, (batch, 1))

    def onehot(self, tokens: np.ndarray) -> np.ndarray:
        """One-hot of the revealed slots, ``(B, n_categories)``; masks map to zeros."""
        tokens = np.atleast_2d(tokens)
        revealed = tokens < self.alphabet[None, :]
        rows, slots = np.nonzero(revealed)
        onehot = np.zeros((tokens.shape[0], self.n_categories), dtype=np.float32)
        onehot[rows, self.offsets[slots] + tokens[rows, slots]] = 1.0
        return onehot

    def split(self, tokens: np.ndarray) -> dict[str, MaskedSequence]:
        return {m: MaskedSequence(tokens[..., self.slices[m]], m) for m in MODALITIES}

    def join(self, sequences: dict[str, MaskedSequence | np.ndarray]) -> np.ndarray:
        parts = []
        for m in MODALITIES:
            seq = sequences[m]
            parts.append(seq.tokens if isinstance(seq, MaskedSequence) else np.asarray(seq))
        return np.concatenate(parts, axis=-1)

    def per_slot(self, flat: np.ndarray, modality: str) -> np.ndarray:
        """Reshape a ``(B, n_categories)`` array to ``(B, slots, K)`` for one modality."""
        block = flat[:, self.category_slices[modality]]
        return block.reshape(flat.shape[0], -1, ALPHABET_SIZES[modality])


@lru_cache(maxsize=None)
def slot_layout(n_atoms: int) -> SlotLayout:
    return SlotLayout(n_atoms)


def continuous_interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolant ``(1 - t) x0 + t x1``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"Shape mismatch: x0 {x0.shape} vs x1 {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def mask_interpolate(
    x1: MaskedSequence, t: float, rng: np.random.Generator
) -> MaskedSequence:
    """Keep each clean token with probability ``t``, otherwise mask it."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if x1.is_masked.any():
        raise ValueError("mask_interpolate expects a sequence without mask tokens")
    keep = rng.random(x1.tokens.shape) < t
    return MaskedSequence(np.where(keep, x1.tokens, x1.mask_token), x1.modality)


def masking_marginal(p_data: np.ndarray, t: float) -> np.ndarray:
    """Marginal ``t * p_data + (1 - t) * delta_M`` with the mask as the last entry."""
    p_data = np.asarray(p_data, dtype=np.float64)
    return np.concatenate([t * p_data, np.full(p_data.shape[:-1] + (1,), 1.0 - t)], axis=-1)


def remove_mean(x: np.ndarray, n_atoms: int) -> np.ndarray:
    """Project flattened ``(B, 3n)`` coordinates onto the zero centre-of-mass subspace."""
    shaped = x.reshape(x.shape[0], n_atoms, 3)
    return (shaped - shaped.mean(axis=1, keepdims=True)).reshape(x.shape)


def centered_gaussian(rng: np.random.Generator, n_atoms: int) -> np.ndarray:
    """Standard Gaussian positions projected to zero centre of mass, flattened."""
    return remove_mean(rng.normal(size=(1, 3 * n_atoms)), n_atoms)[0]
