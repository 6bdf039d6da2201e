"""Canonical atom ordering and relabeling-invariant molecule keys.

Ordering uses colour refinement (each atom's colour is repeatedly replaced by the
rank of its colour plus the sorted multiset of neighbour colours and bond orders)
followed by individualization when refinement leaves ties. Every leaf of the
search tree yields a discrete colouring; the leaf whose relabeled graph is
lexicographically smallest defines the canonical order.
"""

from collections.abc import Sequence

import numpy as np

from .molecule import ATOM_SYMBOLS, ToyMolecule, bond_pairs

_CHARGE_SIGNS = {-1: "-", 0: "0", 1: "+"}

Certificate = tuple[tuple[tuple[int, int], ...], tuple[int, ...]]


def _rank(signatures: Sequence) -> list[int]:
    lookup = {sig: rank for rank, sig in enumerate(sorted(set(signatures)))}
    return [lookup[sig] for sig in signatures]


class _Graph:
    def __init__(self, labels: list[tuple[int, int]], bonds: np.ndarray):
        self.labels = labels
        self.bonds = bonds
        self.n = len(labels)
        self.neighbors = [
            [(j, int(bonds[i, j])) for j in range(self.n) if bonds[i, j] > 0]
            for i in range(self.n)
        ]

    def refine(self, colors: list[int]) -> list[int]:
        n_cells = len(set(colors))
        while True:
            signatures = [
                (colors[i], tuple(sorted((colors[j], o) for j, o in self.neighbors[i])))
                for i in range(self.n)
            ]
            colors = _rank(signatures)
            if len(set(colors)) == n_cells:
                return colors
            n_cells = len(set(colors))

    def are_twins(self, u: int, v: int) -> bool:
        return all(
            self.bonds[u, k] == self.bonds[v, k] for k in range(self.n) if k not in (u, v)
        )

    def certificate(self, order: list[int]) -> Certificate:
        labels = tuple(self.labels[i] for i in order)
        relabeled = self.bonds[np.ix_(order, order)]
        rows, cols = bond_pairs(self.n)
        return labels, tuple(int(b) for b in relabeled[rows, cols])

    def search(self, colors: list[int]) -> tuple[Certificate, list[int]]:
        colors = self.refine(colors)
        if len(set(colors)) == self.n:
            order = sorted(range(self.n), key=colors.__getitem__)
            return self.certificate(order), order

        cell_sizes: dict[int, int] = {}
        for c in colors:
            cell_sizes[c] = cell_sizes.get(c, 0) + 1
        target = min(c for c, size in cell_sizes.items() if size > 1)
        members = [i for i in range(self.n) if colors[i] == target]

        best: tuple[Certificate, list[int]] | None = None
        tried: list[int] = []
        for v in members:
            if any(self.are_twins(u, v) for u in tried):
                continue
            tried.append(v)
            individualized = _rank(
                [
                    (colors[i], 1 if colors[i] == target and i != v else 0)
                    for i in range(self.n)
                ]
            )
            leaf = self.search(individualized)
            if best is None or leaf[0] < best[0]:
                best = leaf
        assert best is not None
        return best


def _graph_of(mol: ToyMolecule) -> _Graph:
    labels = [(int(a), int(c)) for a, c in zip(mol.atom_types, mol.charges, strict=True)]
    return _Graph(labels, mol.bond_matrix())


def canonical_order(mol: ToyMolecule) -> list[int]:
    """Atom order such that ``mol.permuted(order)`` is the canonical form."""
    graph = _graph_of(mol)
    _, order = graph.search(_rank(graph.labels))
    return order


def canonicalize(mol: ToyMolecule) -> ToyMolecule:
    return mol.permuted(canonical_order(mol))


def key_from_certificate(certificate: Certificate) -> str:
    labels, bonds = certificate
    types = "".join(ATOM_SYMBOLS[a] for a, _ in labels)
    charges = "".join(_CHARGE_SIGNS[c] for _, c in labels)
    return f"{len(labels)}:{types}:{charges}:{''.join(str(b) for b in bonds)}"


def canonical_key(mol: ToyMolecule) -> str:
    """Position-free string identifying the labeled bond graph up to relabeling.

    Example: a neutral X-X pair joined by a single bond maps to ``"2:XX:00:1"``.
    """
    graph = _graph_of(mol)
    certificate, _ = graph.search(_rank(graph.labels))
    return key_from_certificate(certificate)
