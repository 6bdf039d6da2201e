#!/usr/bin/env python3
"""Tests for canonical ordering and relabeling-invariant keys."""

import itertools

import numpy as np
import pytest
from conftest import make_molecule

from flowguide.toymol import (
    Dataset,
    ToyMolecule,
    bond_pairs,
    canonical_key,
    canonical_order,
    canonicalize,
)


def brute_force_certificate(mol: ToyMolecule) -> tuple:
    """Smallest (labels, bonds) tuple over every atom relabeling."""
    n = mol.n_atoms
    rows, cols = bond_pairs(n)
    matrix = mol.bond_matrix()
    labels = list(zip(mol.atom_types.tolist(), mol.charges.tolist(), strict=True))
    best = None
    for order in itertools.permutations(range(n)):
        relabeled = matrix[np.ix_(order, order)]
        cert = (tuple(labels[i] for i in order), tuple(relabeled[rows, cols].tolist()))
        if best is None or cert < best:
            best = cert
    return best


def enumerate_neutral(n: int, symbols: str) -> list[ToyMolecule]:
    slots = n * (n - 1) // 2
    return [
        make_molecule("".join(types), [0] * n, list(bonds))
        for types in itertools.product(symbols, repeat=n)
        for bonds in itertools.product(range(4), repeat=slots)
    ]


def check_key_matches_isomorphism(molecules: list[ToyMolecule]) -> None:
    by_certificate: dict[tuple, set[str]] = {}
    for mol in molecules:
        by_certificate.setdefault(brute_force_certificate(mol), set()).add(canonical_key(mol))
    # One key per isomorphism class, and no key shared by two classes
    assert all(len(keys) == 1 for keys in by_certificate.values())
    all_keys = [next(iter(keys)) for keys in by_certificate.values()]
    assert len(set(all_keys)) == len(all_keys)


class TestCanonicalKey:
    def test_example_key(self):
        mol = make_molecule("XX", [0, 0], [1])
        assert canonical_key(mol) == "2:XX:00:1"

    def test_charges_are_part_of_the_key(self):
        neutral = make_molecule("XY", [0, 0], [1])
        charged = make_molecule("XY", [0, -1], [1])
        assert canonical_key(neutral) != canonical_key(charged)

    def test_permutation_invariance(self, small_dataset: Dataset):
        rng = np.random.default_rng(7)
        for mol in small_dataset.molecules[:50]:
            for _ in range(3):
                shuffled = mol.permuted(rng.permutation(mol.n_atoms))
                assert canonical_key(shuffled) == canonical_key(mol)

    def test_path_and_star_differ(self):
        # Both have three single bonds on four atoms
        path = make_molecule("XXXX", [0] * 4, [1, 0, 0, 1, 0, 1])
        star = make_molecule("XXXX", [0] * 4, [1, 1, 1, 0, 0, 0])
        assert canonical_key(path) != canonical_key(star)

    @pytest.mark.parametrize("n", [2, 3])
    def test_exhaustive_small_graphs(self, n: int):
        check_key_matches_isomorphism(enumerate_neutral(n, "XYZW"))

    @pytest.mark.slow
    def test_exhaustive_four_atoms(self):
        check_key_matches_isomorphism(enumerate_neutral(4, "XY"))


class TestCanonicalOrder:
    def test_order_is_a_permutation(self, small_dataset: Dataset):
        for mol in small_dataset.molecules[:30]:
            assert sorted(canonical_order(mol)) == list(range(mol.n_atoms))

    def test_canonical_forms_agree_up_to_positions(self, small_dataset: Dataset):
        rng = np.random.default_rng(11)
        for mol in small_dataset.molecules[:30]:
            a = canonicalize(mol)
            b = canonicalize(mol.permuted(rng.permutation(mol.n_atoms)))
            np.testing.assert_array_equal(a.atom_types, b.atom_types)
            np.testing.assert_array_equal(a.charges, b.charges)
            np.testing.assert_array_equal(a.bond_orders, b.bond_orders)
