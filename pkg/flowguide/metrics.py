"""Evaluation metrics for generated molecules and radar min-max scaling."""

import logging
from collections.abc import Iterable, Sequence
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from flowguide.errors import AllZero, DegenerateRange, EmptyInput
from flowguide.toymol import (
    N_ATOM_TYPES,
    N_BOND_ORDERS,
    Dataset,
    ToyMolecule,
    canonical_key,
    is_valid,
    molecule_stability,
    property_oracle,
)

logger = logging.getLogger(__name__)

# (low, high, higher_better); the MAE axis takes its high end from the #atoms baseline.
RADAR_RANGES: dict[str, tuple[float, float, bool]] = {
    "structure_validity": (0.90, 1.00, True),
    "uniqueness": (0.90, 1.00, True),
    "sampling_cost": (1.0, 2.0, False),
}


class MetricReport(BaseModel):
    """Aggregate metrics for one set of generated molecules."""

    n_samples: int = Field(description="Number of generated molecules")
    property_mae: float = Field(description="Mean |property - target|")
    molecule_stability_ratio: float = Field(description="Fraction of stable molecules")
    atom_stability_ratio: float = Field(description="Fraction of stable atoms")
    validity_ratio: float = Field(description="Fraction passing is_valid")
    valid_and_unique_ratio: float = Field(description="Distinct valid molecules / samples")
    structure_validity: float = Field(
        description="Mean of molecule stability and validity ratios"
    )
    bond_entropy: float = Field(description="Bits over single/double/triple bonds")
    element_entropy: float = Field(description="Bits over atom types")
    forward_passes: int = Field(default=1, description="Denoiser evaluations per step")
    sampling_seconds: float = Field(default=0.0, description="Wall-clock sampling time")
    scaled: dict[str, float] = Field(default_factory=dict, description="Radar scores")


def _molecules(samples: Iterable[Any]) -> list[ToyMolecule]:
    return [s if isinstance(s, ToyMolecule) else s[0] for s in samples]


def _require(samples: Sequence[Any], what: str) -> None:
    if len(samples) == 0:
        raise EmptyInput(f"{what} needs at least one sample")


def property_mae(samples: Sequence[tuple[ToyMolecule, float]]) -> float:
    """Mean absolute error between oracle properties and targets."""
    _require(samples, "property_mae")
    errors = [abs(property_oracle(mol) - target) for mol, target in samples]
    return float(np.mean(errors))


def shannon_entropy(counts: Sequence[float] | np.ndarray) -> float:
    """Base-2 entropy of normalized counts; empty categories contribute nothing."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError(f"Counts must be nonnegative, got {counts}")
    total = counts.sum()
    if total <= 0:
        raise AllZero("Entropy of all-zero counts is undefined")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def uniqueness(samples: Sequence[Any]) -> float:
    """Distinct canonical keys among valid molecules, over all samples."""
    _require(samples, "uniqueness")
    molecules = _molecules(samples)
    keys = {canonical_key(m) for m in molecules if is_valid(m)}
    return len(keys) / len(molecules)


def radar_scale(value: float, low: float, high: float, higher_better: bool) -> float:
    """Min-max score in [0, 1]; values outside the range clamp."""
    if high <= low:
        raise DegenerateRange(f"Radar range needs max > min, got ({low}, {high})")
    score = (value - low) / (high - low) if higher_better else (high - value) / (high - low)
    return float(np.clip(score, 0.0, 1.0))


def molecule_stability_ratio(samples: Sequence[Any]) -> float:
    _require(samples, "molecule_stability_ratio")
    return float(np.mean([molecule_stability(m).molecule_stable for m in _molecules(samples)]))


def atom_stability_ratio(samples: Sequence[Any]) -> float:
    _require(samples, "atom_stability_ratio")
    stable = np.concatenate([molecule_stability(m).per_atom_stable for m in _molecules(samples)])
    return float(stable.mean())


def validity_ratio(samples: Sequence[Any]) -> float:
    _require(samples, "validity_ratio")
    return float(np.mean([is_valid(m) for m in _molecules(samples)]))


def structure_validity(samples: Sequence[Any]) -> float:
    return 0.5 * (molecule_stability_ratio(samples) + validity_ratio(samples))


def element_entropy(samples: Sequence[Any]) -> float:
    types = np.concatenate([m.atom_types for m in _molecules(samples)])
    return shannon_entropy(np.bincount(types, minlength=N_ATOM_TYPES))


def bond_entropy(samples: Sequence[Any]) -> float:
    orders = np.concatenate([m.bond_orders for m in _molecules(samples)])
    return shannon_entropy(np.bincount(orders, minlength=N_BOND_ORDERS)[1:])


def n_atoms_baseline(dataset: Dataset) -> float:
    """MAE of predicting each property by the mean property of its atom-count stratum."""
    if len(dataset) == 0:
        raise EmptyInput("Baseline needs a nonempty dataset")
    errors = [
        np.abs(stratum.properties - stratum.properties.mean())
        for stratum in (dataset.stratum(n) for n in dataset.atom_counts())
    ]
    return float(np.concatenate(errors).mean())


def radar_scores(report: MetricReport, mae_max: float | None = None) -> dict[str, float]:
    scores = {
        "structure_validity": radar_scale(
            report.structure_validity, *RADAR_RANGES["structure_validity"]
        ),
        "uniqueness": radar_scale(report.valid_and_unique_ratio, *RADAR_RANGES["uniqueness"]),
        "sampling_cost": radar_scale(report.forward_passes, *RADAR_RANGES["sampling_cost"]),
    }
    if mae_max is not None and mae_max > 0:
        scores["property_alignment"] = radar_scale(report.property_mae, 0.0, mae_max, False)
    return scores


def metric_report(
    samples: Sequence[tuple[ToyMolecule, float]],
    forward_passes: int = 1,
    sampling_seconds: float = 0.0,
    mae_max: float | None = None,
) -> MetricReport:
    """Compute every metric for ``samples`` and attach radar scores.

    Args:
        samples: Generated molecules with their targets
        forward_passes: Denoiser evaluations per integration step
        sampling_seconds: Wall-clock time spent sampling
        mae_max: Upper end of the property-alignment radar axis (e.g. the #atoms baseline)

    Returns:
        MetricReport
    """
    _require(samples, "metric_report")
    try:
        bonds = bond_entropy(samples)
    except AllZero:
        logger.debug("No bonds in any sample; bond entropy set to 0")
        bonds = 0.0
    stability = molecule_stability_ratio(samples)
    validity = validity_ratio(samples)
    report = MetricReport(
        n_samples=len(samples),
        property_mae=property_mae(samples),
        molecule_stability_ratio=stability,
        atom_stability_ratio=atom_stability_ratio(samples),
        validity_ratio=validity,
        valid_and_unique_ratio=uniqueness(samples),
        structure_validity=0.5 * (stability + validity),
        bond_entropy=bonds,
        element_entropy=element_entropy(samples),
        forward_passes=forward_passes,
        sampling_seconds=sampling_seconds,
    )
    return report.model_copy(update={"scaled": radar_scores(report, mae_max)})
