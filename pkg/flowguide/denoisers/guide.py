"""Deliberately degraded guide models for autoguidance."""

import logging
from typing import Any, NamedTuple

import numpy as np
from pydantic import BaseModel, Field

from flowguide.toymol import Dataset

from .posterior import EmpiricalPosterior
from .velocity import GaussianVelocityModel, fit_velocity_model

logger = logging.getLogger(__name__)


class GuideModelSpec(BaseModel):
    """How the autoguidance guide is degraded relative to the main model."""

    name: str = Field(default="guide", description="Label used in reports")
    subsample_fraction: float = Field(
        default=1.0,
        gt=0.0,
        le=1.0,
        description="Fraction of the training rows the guide sees (shorter training)",
    )
    smoothing: float = Field(
        default=0.0,
        ge=0.0,
        description="Additive label smoothing on discrete counts; continuous "
        "variances are inflated by 1 + smoothing (lower capacity)",
    )
    marginalize_positions: bool = Field(
        default=False,
        description="Guide velocity ignores the property condition",
    )
    seed: int = Field(default=0, description="Seed of the subsample draw")


DEFAULT_GUIDES: tuple[GuideModelSpec, ...] = (
    GuideModelSpec(name="undertrained", subsample_fraction=0.3),
    GuideModelSpec(name="low_capacity", smoothing=2.0, marginalize_positions=True),
)


class GuideModel(NamedTuple):
    spec: GuideModelSpec
    posterior: EmpiricalPosterior
    velocity: GaussianVelocityModel


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    if fraction >= 1.0:
        return dataset
    size = max(1, int(round(fraction * len(dataset))))
    rows = np.random.default_rng(seed).choice(len(dataset), size=size, replace=False)
    return dataset.subset(rows)


def build_guide(
    dataset: Dataset,
    spec: GuideModelSpec,
    min_bin_count: int = 5,
    variance_floor: float = 1e-6,
) -> GuideModel:
    """Fit the degraded posterior and velocity model described by ``spec``.

    With ``subsample_fraction=1``, ``smoothing=0`` and conditional positions the
    guide is fitted on the same rows through the same code path as the main
    model, so the two are identical.
    """
    data = subsample(dataset, spec.subsample_fraction, spec.seed)
    logger.info(
        f"Building guide '{spec.name}': {len(data)}/{len(dataset)} rows, "
        f"smoothing={spec.smoothing}, marginalize_positions={spec.marginalize_positions}"
    )
    velocity = fit_velocity_model(
        data,
        conditional=not spec.marginalize_positions,
        min_bin_count=min_bin_count,
        variance_floor=variance_floor,
        variance_inflation=spec.smoothing,
    )
    # Atom counts the subsample never drew fall back to the full pooled stratum
    missing = [n for n in dataset.atom_counts() if (n, None) not in velocity.means]
    for n_atoms in missing:
        velocity.add_entry((n_atoms, None), dataset.stratum(n_atoms).positions, variance_floor)
    if missing:
        logger.warning(f"Guide '{spec.name}' uses pooled full-data entries for n_atoms={missing}")
    return GuideModel(
        spec=spec,
        posterior=EmpiricalPosterior(data, smoothing=spec.smoothing),
        velocity=velocity,
    )


def guide_state(guide: GuideModel) -> dict[str, Any]:
    return {
        "spec": guide.spec.model_dump(),
        "posterior": guide.posterior.to_state(),
        "velocity": guide.velocity.to_state(),
    }


def guide_from_state(state: dict[str, Any], dataset: Dataset) -> GuideModel:
    spec = GuideModelSpec.model_validate(state["spec"])
    data = subsample(dataset, spec.subsample_fraction, spec.seed)
    return GuideModel(
        spec=spec,
        posterior=EmpiricalPosterior.from_state(state["posterior"], data),
        velocity=GaussianVelocityModel.from_state(state["velocity"]),
    )
