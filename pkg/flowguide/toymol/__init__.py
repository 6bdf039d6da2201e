"""Toy molecular domain: representation, validity, property oracle and datasets."""

from .canonical import canonical_key, canonical_order, canonicalize
from .dataset import (
    N_BINS,
    Dataset,
    Stratum,
    build_molecule,
    generate_dataset,
    split_dataset,
)
from .molecule import (
    ATOM_SYMBOLS,
    MASK_ATOM,
    MASK_BOND,
    MASK_CHARGE,
    MAX_ATOMS,
    MIN_ATOMS,
    N_ATOM_TYPES,
    N_BOND_ORDERS,
    N_CHARGES,
    VALENCE_TABLE,
    StabilityResult,
    ToyMolecule,
    ValenceTable,
    bond_pairs,
    center_positions,
    is_connected,
    is_valid,
    molecule_stability,
    n_bond_slots,
    property_oracle,
)

__all__ = [
    "ATOM_SYMBOLS",
    "MASK_ATOM",
    "MASK_BOND",
    "MASK_CHARGE",
    "MAX_ATOMS",
    "MIN_ATOMS",
    "N_ATOM_TYPES",
    "N_BINS",
    "N_BOND_ORDERS",
    "N_CHARGES",
    "VALENCE_TABLE",
    "Dataset",
    "StabilityResult",
    "Stratum",
    "ToyMolecule",
    "ValenceTable",
    "bond_pairs",
    "build_molecule",
    "canonical_key",
    "canonical_order",
    "canonicalize",
    "center_positions",
    "generate_dataset",
    "is_connected",
    "is_valid",
    "molecule_stability",
    "n_bond_slots",
    "property_oracle",
    "split_dataset",
]
