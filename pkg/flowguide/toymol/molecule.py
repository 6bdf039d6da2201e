"""Toy molecule representation, validity rules and the property oracle."""

from functools import lru_cache
from typing import Any, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ATOM_SYMBOLS = ("X", "Y", "Z", "W")
MIN_ATOMS = 2
MAX_ATOMS = 9
MAX_BOND_ORDER = 3
CENTERING_TOLERANCE = 1e-9

# Alphabet sizes per discrete modality; the mask token takes the next code.
N_ATOM_TYPES = len(ATOM_SYMBOLS)
N_CHARGES = 3
N_BOND_ORDERS = MAX_BOND_ORDER + 1
MASK_ATOM = N_ATOM_TYPES
MASK_CHARGE = N_CHARGES
MASK_BOND = N_BOND_ORDERS


class ValenceTable(BaseModel):
    """Per-symbol valence and electronegativity of the toy alphabet."""

    model_config = ConfigDict(frozen=True)

    base_valence: dict[str, int] = Field(
        description="Bond-order sum of a neutral atom of each type",
        default_factory=lambda: {"X": 1, "Y": 2, "Z": 3, "W": 4},
    )
    electronegativity: dict[str, float] = Field(
        description="Dimensionless electronegativity used by the property oracle",
        default_factory=lambda: {"X": 2.2, "Y": 3.0, "Z": 3.5, "W": 2.5},
    )

    @model_validator(mode="after")
    def _check_alphabet(self) -> "ValenceTable":
        for name, table in (
            ("base_valence", self.base_valence),
            ("electronegativity", self.electronegativity),
        ):
            if set(table) != set(ATOM_SYMBOLS):
                raise ValueError(
                    f"{name} must have exactly one entry per symbol {ATOM_SYMBOLS}, "
                    f"got {sorted(table)}"
                )
        return self

    def valence_array(self) -> np.ndarray:
        return np.array([self.base_valence[s] for s in ATOM_SYMBOLS], dtype=np.int64)

    def electronegativity_array(self) -> np.ndarray:
        return np.array(
            [self.electronegativity[s] for s in ATOM_SYMBOLS], dtype=np.float64
        )


VALENCE_TABLE = ValenceTable()
BASE_VALENCE = VALENCE_TABLE.valence_array()
ELECTRONEGATIVITY = VALENCE_TABLE.electronegativity_array()


@lru_cache(maxsize=None)
def bond_pairs(n_atoms: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the unordered atom pairs, in bond-slot order."""
    rows, cols = np.triu_indices(n_atoms, 1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def n_bond_slots(n_atoms: int) -> int:
    return n_atoms * (n_atoms - 1) // 2


def center_positions(positions: np.ndarray) -> np.ndarray:
    """Subtract the centroid so the point cloud sits at the origin."""
    positions = np.asarray(positions, dtype=np.float64)
    return positions - positions.mean(axis=0, keepdims=True)


def _frozen_array(value: Any, dtype: type) -> np.ndarray:
    array = np.array(value, dtype=dtype)
    array.setflags(write=False)
    return array


class ToyMolecule(BaseModel):
    """A joint sample of atom types, formal charges, bond orders and positions.

    Atom types are stored as codes into ``ATOM_SYMBOLS``, charges as integers in
    {-1, 0, +1}, and bond orders as a flat vector over the pairs returned by
    :func:`bond_pairs`. Positions are an ``(n_atoms, 3)`` array centered at the
    origin.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    atom_types: np.ndarray = Field(description="Atom type codes, 0..3 for X, Y, Z, W")
    charges: np.ndarray = Field(description="Formal charges in {-1, 0, +1}")
    bond_orders: np.ndarray = Field(
        description="Bond orders 0..3 over unordered pairs i<j in triu order"
    )
    positions: np.ndarray = Field(description="Centered 3D coordinates, shape (n, 3)")

    @field_validator("atom_types", "charges", "bond_orders", mode="before")
    @classmethod
    def _as_int_array(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64)

    @field_validator("positions", mode="before")
    @classmethod
    def _as_float_array(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.float64)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ToyMolecule":
        n = len(self.atom_types)
        if not MIN_ATOMS <= n <= MAX_ATOMS:
            raise ValueError(f"n_atoms must be in [{MIN_ATOMS}, {MAX_ATOMS}], got {n}")
        if self.atom_types.ndim != 1 or len(self.charges) != n:
            raise ValueError(f"Expected {n} charges, got {len(self.charges)}")
        if len(self.bond_orders) != n_bond_slots(n):
            raise ValueError(
                f"Expected {n_bond_slots(n)} bond orders, got {len(self.bond_orders)}"
            )
        if self.positions.shape != (n, 3):
            raise ValueError(f"Expected positions of shape ({n}, 3), got {self.positions.shape}")
        if self.atom_types.min() < 0 or self.atom_types.max() >= N_ATOM_TYPES:
            raise ValueError(f"Atom type codes out of range: {self.atom_types}")
        if np.abs(self.charges).max() > 1:
            raise ValueError(f"Charges out of range: {self.charges}")
        if len(self.bond_orders) and (
            self.bond_orders.min() < 0 or self.bond_orders.max() > MAX_BOND_ORDER
        ):
            raise ValueError(f"Bond orders out of range: {self.bond_orders}")
        centroid = self.positions.mean(axis=0)
        if np.abs(centroid).max() > CENTERING_TOLERANCE:
            raise ValueError(f"Positions are not centered, centroid={centroid}")
        return self

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToyMolecule):
            return NotImplemented
        return (
            np.array_equal(self.atom_types, other.atom_types)
            and np.array_equal(self.charges, other.charges)
            and np.array_equal(self.bond_orders, other.bond_orders)
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    @property
    def symbols(self) -> str:
        return "".join(ATOM_SYMBOLS[a] for a in self.atom_types)

    @property
    def charge_codes(self) -> np.ndarray:
        """Charges shifted to token codes 0..2."""
        return self.charges + 1

    def bond_matrix(self) -> np.ndarray:
        """Symmetric ``(n, n)`` bond-order matrix with a zero diagonal."""
        n = self.n_atoms
        rows, cols = bond_pairs(n)
        matrix = np.zeros((n, n), dtype=np.int64)
        matrix[rows, cols] = self.bond_orders
        matrix[cols, rows] = self.bond_orders
        return matrix

    def permuted(self, order: np.ndarray | list[int]) -> "ToyMolecule":
        """Relabel atoms so that new atom ``k`` is old atom ``order[k]``."""
        order = np.asarray(order, dtype=np.int64)
        rows, cols = bond_pairs(self.n_atoms)
        matrix = self.bond_matrix()[np.ix_(order, order)]
        return ToyMolecule(
            atom_types=self.atom_types[order],
            charges=self.charges[order],
            bond_orders=matrix[rows, cols],
            positions=self.positions[order],
        )

    def to_codes(self) -> np.ndarray:
        """Flat token codes: atom types | charge codes | bond orders."""
        return np.concatenate([self.atom_types, self.charge_codes, self.bond_orders])

    @classmethod
    def from_codes(
        cls,
        atom_types: np.ndarray,
        charge_codes: np.ndarray,
        bond_orders: np.ndarray,
        positions: np.ndarray,
    ) -> "ToyMolecule":
        """Build a molecule from sampler token codes, recentering positions."""
        return cls(
            atom_types=atom_types,
            charges=np.asarray(charge_codes, dtype=np.int64) - 1,
            bond_orders=bond_orders,
            positions=center_positions(np.asarray(positions).reshape(-1, 3)),
        )


class StabilityResult(NamedTuple):
    """Per-atom and whole-molecule valence check."""

    per_atom_stable: np.ndarray
    molecule_stable: bool


def property_oracle(mol: ToyMolecule) -> float:
    """Dipole-like scalar property depending on every modality.

    ``c = |sum_i (chi_i + C_i - mean) * X_i| + 0.1 * sum bond orders + 0.05 * n``
    """
    q = ELECTRONEGATIVITY[mol.atom_types] + mol.charges
    dipole = ((q - q.mean())[:, None] * mol.positions).sum(axis=0)
    return float(
        1.0 * np.linalg.norm(dipole)
        + 0.1 * mol.bond_orders.sum()
        + 0.05 * mol.n_atoms
    )


def molecule_stability(mol: ToyMolecule) -> StabilityResult:
    valence = mol.bond_matrix().sum(axis=1)
    per_atom = valence == BASE_VALENCE[mol.atom_types] + mol.charges
    return StabilityResult(
        per_atom_stable=per_atom,
        molecule_stable=bool(per_atom.all() and mol.charges.sum() == 0),
    )


def is_connected(mol: ToyMolecule) -> bool:
    graph = csr_matrix(mol.bond_matrix() >= 1)
    n_components, _ = connected_components(graph, directed=False)
    return n_components == 1


def is_valid(mol: ToyMolecule) -> bool:
    """Stable with zero net charge and a connected bond graph."""
    return molecule_stability(mol).molecule_stable and is_connected(mol)
