"""Shared fixtures: a small deterministic dataset and models fitted on it."""

import numpy as np
import pytest

from flowguide.denoisers import EmpiricalPosterior, fit_velocity_model, train_mg
from flowguide.sampler import ModelBundle
from flowguide.toymol import Dataset, ToyMolecule, generate_dataset


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    return generate_dataset(seed=1, count=300, n_bins=4)


@pytest.fixture(scope="session")
def bundle(small_dataset: Dataset) -> ModelBundle:
    posterior = EmpiricalPosterior(small_dataset)
    velocity = fit_velocity_model(small_dataset)
    return ModelBundle(small_dataset, posterior, velocity, {})


@pytest.fixture(scope="session")
def mg_bundle(small_dataset: Dataset, bundle: ModelBundle) -> ModelBundle:
    mg = train_mg(
        small_dataset,
        epochs=1,
        warmup=50,
        ema_decay=0.99,
        seed=0,
        velocity_model=bundle.velocity,
        posterior=bundle.posterior,
    )
    return bundle._replace(mg=mg, guides={})


def make_molecule(
    symbols: str,
    charges: list[int],
    bonds: list[int],
    positions: list[list[float]] | None = None,
) -> ToyMolecule:
    """Molecule from a symbol string; positions default to a centered line."""
    n = len(symbols)
    if positions is None:
        xs = np.arange(n, dtype=np.float64) * 1.5
        positions = np.stack([xs - xs.mean(), np.zeros(n), np.zeros(n)], axis=1).tolist()
    return ToyMolecule(
        atom_types=["XYZW".index(s) for s in symbols],
        charges=charges,
        bond_orders=bonds,
        positions=positions,
    )


@pytest.fixture
def xx_pair() -> ToyMolecule:
    """Neutral X-X joined by a single bond."""
    return make_molecule("XX", [0, 0], [1])
