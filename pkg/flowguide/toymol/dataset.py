"""Synthetic dataset generation for the toy molecular domain."""

import logging
from collections.abc import Sequence
from typing import Any, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr
from tqdm import tqdm

from flowguide.errors import ConstructionFailure

from .canonical import canonicalize
from .molecule import (
    MAX_ATOMS,
    MIN_ATOMS,
    ToyMolecule,
    bond_pairs,
    center_positions,
    property_oracle,
)

logger = logging.getLogger(__name__)

N_BINS = 16
MIN_DATASET_SIZE = 100
MAX_REPAIR_ITERATIONS = 1000
MAX_CONSECUTIVE_RESAMPLES = 100
MAX_BOND_SUM = 4
BOND_LENGTH = 1.5
POSITION_NOISE = 0.1
NEUTRAL_PROBABILITY = 0.8

# Categorical over n_atoms = 2..9
N_ATOMS_PROBS = np.array([0.05, 0.10, 0.15, 0.20, 0.20, 0.15, 0.10, 0.05])

# (type code, charge) pairs whose valence equals the bond-order sum, neutral first.
LABEL_OPTIONS: dict[int, list[tuple[int, int]]] = {
    1: [(0, 0), (1, -1)],
    2: [(1, 0), (0, 1), (2, -1)],
    3: [(2, 0), (1, 1), (3, -1)],
    4: [(3, 0), (2, 1)],
}


class Stratum(NamedTuple):
    """Dataset rows sharing one atom count, as dense arrays."""

    indices: np.ndarray
    tokens: np.ndarray  # (N, slots): type codes | charge codes | bond orders
    positions: np.ndarray  # (N, 3n) canonical-ordered, centered
    bins: np.ndarray
    properties: np.ndarray


class Dataset(BaseModel):
    """Immutable collection of molecules with their properties and bin table."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    molecules: list[ToyMolecule] = Field(description="Canonically ordered molecules")
    properties: np.ndarray = Field(description="property_oracle value per molecule")
    bin_edges: np.ndarray = Field(description="N_BINS + 1 equal-frequency edges")
    joint_nc: np.ndarray = Field(
        description="Empirical joint p(n_atoms, bin), rows n=2..9, columns bins"
    )
    seed: int | None = Field(default=None, description="Generation seed, if any")

    _n_atoms: np.ndarray = PrivateAttr()
    _bins: np.ndarray = PrivateAttr()
    _strata: dict[int, Stratum] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context: Any) -> None:
        self._n_atoms = np.array([m.n_atoms for m in self.molecules], dtype=np.int64)
        self._bins = self.bin_of(self.properties)

    @classmethod
    def from_molecules(
        cls,
        molecules: Sequence[ToyMolecule],
        n_bins: int = N_BINS,
        bin_edges: np.ndarray | None = None,
        seed: int | None = None,
    ) -> "Dataset":
        molecules = list(molecules)
        properties = np.array([property_oracle(m) for m in molecules], dtype=np.float64)
        if bin_edges is None:
            bin_edges = np.quantile(properties, np.linspace(0.0, 1.0, n_bins + 1))
        bin_edges = np.asarray(bin_edges, dtype=np.float64)
        n_bins = len(bin_edges) - 1
        bins = _bin_of(bin_edges, properties)
        joint = np.zeros((MAX_ATOMS - MIN_ATOMS + 1, n_bins), dtype=np.float64)
        n_atoms = np.array([m.n_atoms for m in molecules], dtype=np.int64)
        np.add.at(joint, (n_atoms - MIN_ATOMS, bins), 1.0)
        if len(molecules):
            joint /= len(molecules)
        return cls(
            molecules=molecules,
            properties=properties,
            bin_edges=bin_edges,
            joint_nc=joint,
            seed=seed,
        )

    def __len__(self) -> int:
        return len(self.molecules)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.molecules == other.molecules
            and np.array_equal(self.properties, other.properties)
            and np.array_equal(self.bin_edges, other.bin_edges)
            and np.array_equal(self.joint_nc, other.joint_nc)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_bins(self) -> int:
        return len(self.bin_edges) - 1

    @property
    def n_atoms(self) -> np.ndarray:
        return self._n_atoms

    @property
    def bins(self) -> np.ndarray:
        return self._bins

    def bin_of(self, c: float | np.ndarray) -> Any:
        return _bin_of(self.bin_edges, c)

    def atom_counts(self) -> list[int]:
        return sorted(set(self._n_atoms.tolist()))

    def stratum(self, n_atoms: int) -> Stratum:
        """Dense arrays for every molecule with ``n_atoms`` atoms (cached)."""
        if n_atoms not in self._strata:
            indices = np.flatnonzero(self._n_atoms == n_atoms)
            mols = [self.molecules[i] for i in indices]
            n_slots = 2 * n_atoms + len(bond_pairs(n_atoms)[0])
            if mols:
                tokens = np.stack([m.to_codes() for m in mols])
                positions = np.stack([m.positions.reshape(-1) for m in mols])
            else:
                tokens = np.zeros((0, n_slots), dtype=np.int64)
                positions = np.zeros((0, 3 * n_atoms), dtype=np.float64)
            self._strata[n_atoms] = Stratum(
                indices=indices,
                tokens=tokens,
                positions=positions,
                bins=self._bins[indices],
                properties=self.properties[indices],
            )
        return self._strata[n_atoms]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        """Rows at ``indices`` (kept in dataset order), sharing this dataset's bins."""
        indices = np.sort(np.asarray(indices, dtype=np.int64))
        return Dataset.from_molecules(
            [self.molecules[i] for i in indices], bin_edges=self.bin_edges
        )

    def draw_condition(self, rng: np.random.Generator) -> tuple[int, float]:
        """Sample (n_atoms, target c) from the joint table.

        The target is a dataset property drawn uniformly from the chosen
        (n, bin) cell, so it always lies inside the bin.
        """
        flat = rng.choice(self.joint_nc.size, p=self.joint_nc.ravel())
        row, b = divmod(int(flat), self.n_bins)
        n_atoms = row + MIN_ATOMS
        cell = np.flatnonzero((self._n_atoms == n_atoms) & (self._bins == b))
        return n_atoms, float(self.properties[rng.choice(cell)])

    def sample_joint(
        self, rng: np.random.Generator, count: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """``count`` independent (n_atoms, target) draws from :meth:`draw_condition`."""
        draws = [self.draw_condition(rng) for _ in range(count)]
        return (
            np.array([n for n, _ in draws], dtype=np.int64),
            np.array([c for _, c in draws], dtype=np.float64),
        )

    def draw_n_atoms(self, rng: np.random.Generator, c: float) -> int:
        """Sample n_atoms from p(n | bin(c))."""
        column = self.joint_nc[:, int(self.bin_of(c))]
        if column.sum() <= 0:
            column = self.joint_nc.sum(axis=1)
        return int(rng.choice(len(column), p=column / column.sum())) + MIN_ATOMS


def _bin_of(edges: np.ndarray, c: float | np.ndarray) -> Any:
    n_bins = len(edges) - 1
    return np.clip(np.searchsorted(edges[1:-1], c, side="right"), 0, n_bins - 1)


def _build_bonds(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Random spanning tree plus optional ring closure and bond upgrades."""
    bonds = np.zeros((n, n), dtype=np.int64)
    parents = np.full(n, -1, dtype=np.int64)
    for i in range(1, n):
        sums = bonds.sum(axis=1)
        candidates = np.flatnonzero(sums[:i] < MAX_BOND_SUM)
        p = int(rng.choice(candidates))
        parents[i] = p
        bonds[p, i] = bonds[i, p] = 1

    if n >= 3 and rng.random() < 0.3:
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        sums = bonds.sum(axis=1)
        if bonds[i, j] == 0 and sums[i] < MAX_BOND_SUM and sums[j] < MAX_BOND_SUM:
            bonds[i, j] = bonds[j, i] = 1

    for _ in range(int(rng.integers(0, n + 1))):
        rows, cols = np.nonzero(np.triu(bonds))
        k = int(rng.integers(len(rows)))
        i, j = int(rows[k]), int(cols[k])
        sums = bonds.sum(axis=1)
        if bonds[i, j] < 3 and sums[i] < MAX_BOND_SUM and sums[j] < MAX_BOND_SUM:
            bonds[i, j] += 1
            bonds[j, i] += 1
    return bonds, parents


def _assign_labels(
    rng: np.random.Generator, sums: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pick (type, charge) per atom so each valence matches, then repair net charge."""
    n = len(sums)
    types = np.zeros(n, dtype=np.int64)
    charges = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(sums):
        options = LABEL_OPTIONS[int(s)]
        if rng.random() < NEUTRAL_PROBABILITY:
            types[i], charges[i] = options[0]
        else:
            types[i], charges[i] = options[1 + int(rng.integers(len(options) - 1))]

    iterations = 0
    while charges.sum() != 0:
        iterations += 1
        if iterations > MAX_REPAIR_ITERATIONS:
            raise ConstructionFailure(
                f"Charge repair exceeded {MAX_REPAIR_ITERATIONS} iterations"
            )
        i = int(rng.integers(n))
        wanted = charges[i] - int(np.sign(charges.sum()))
        for t, c in LABEL_OPTIONS[int(sums[i])]:
            if c == wanted:
                types[i], charges[i] = t, c
                break
    return types, charges


def _embed(rng: np.random.Generator, parents: np.ndarray) -> np.ndarray:
    positions = np.zeros((len(parents), 3), dtype=np.float64)
    for i in range(1, len(parents)):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        positions[i] = (
            positions[parents[i]]
            + BOND_LENGTH * direction
            + rng.normal(0.0, POSITION_NOISE, size=3)
        )
    return center_positions(positions)


def build_molecule(rng: np.random.Generator) -> ToyMolecule:
    """Draw one valid molecule in canonical atom order."""
    n = int(rng.choice(np.arange(MIN_ATOMS, MAX_ATOMS + 1), p=N_ATOMS_PROBS))
    bonds, parents = _build_bonds(rng, n)
    types, charges = _assign_labels(rng, bonds.sum(axis=1))
    positions = _embed(rng, parents)
    rows, cols = bond_pairs(n)
    mol = ToyMolecule(
        atom_types=types,
        charges=charges,
        bond_orders=bonds[rows, cols],
        positions=positions,
    )
    return canonicalize(mol)


def generate_dataset(seed: int, count: int, n_bins: int = N_BINS) -> Dataset:
    """Generate ``count`` valid molecules deterministically from ``seed``."""
    if count < MIN_DATASET_SIZE:
        raise ValueError(f"count must be >= {MIN_DATASET_SIZE}, got {count}")
    rng = np.random.default_rng(seed)
    molecules: list[ToyMolecule] = []
    failures = 0
    with tqdm(total=count, desc="Generating molecules", leave=False) as pbar:
        while len(molecules) < count:
            try:
                molecules.append(build_molecule(rng))
            except ConstructionFailure:
                failures += 1
                logger.debug(f"Resampling molecule after failure #{failures}")
                if failures >= MAX_CONSECUTIVE_RESAMPLES:
                    raise
                continue
            failures = 0
            pbar.update(1)
    dataset = Dataset.from_molecules(molecules, n_bins=n_bins, seed=seed)
    logger.info(
        f"Generated {count} molecules (seed={seed}), property range "
        f"[{dataset.properties.min():.3f}, {dataset.properties.max():.3f}]"
    )
    return dataset


def split_dataset(
    dataset: Dataset, fraction: float, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Disjoint (model, evaluation) split; the first part holds ``fraction`` of rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"Split fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])
