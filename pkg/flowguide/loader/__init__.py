import hashlib
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import pandas as pd
import yaml

from flowguide.denoisers import (
    EmpiricalPosterior,
    GaussianVelocityModel,
    MGModel,
    guide_from_state,
    guide_state,
)
from flowguide.errors import ConfigError
from flowguide.loader.models import (
    BenchmarkConfig,
    DatasetConfig,
    GuidanceConfig,
    GuideConfig,
    MGTrainingConfig,
    ModelConfig,
    RunConfig,
    SamplingConfig,
    TuneConfig,
)
from flowguide.sampler import GeneratedMolecule, ModelBundle
from flowguide.toymol import MAX_ATOMS, MIN_ATOMS, Dataset, ToyMolecule, bond_pairs

# TypeVar for config model injection
ConfigT = TypeVar("ConfigT", bound=RunConfig)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 2


def load_run_config(
    config_path: Path | None = None,
    model_class: type[ConfigT] | None = None,
) -> ConfigT:
    """Load and validate a run configuration from a YAML or JSON file.

    Args:
        config_path: Path to the configuration file; ``None`` gives the defaults
        model_class: Pydantic model class to validate against. Defaults to RunConfig.

    Returns:
        Validated configuration object of the specified model_class type
    """
    if model_class is None:
        model_class = RunConfig  # type: ignore[assignment]
    if config_path is None:
        return model_class()
    with open(config_path) as f:
        config = yaml.safe_load(f)
    if config is not None and not isinstance(config, dict):
        raise ConfigError(f"{config_path} must contain a mapping, got {type(config).__name__}")
    return model_class.model_validate(config or {})


def apply_overrides(config: ConfigT, overrides: dict[str, Any]) -> ConfigT:
    """Return a revalidated copy with dotted-key overrides, e.g. ``{"sampling.steps": 50}``.

    ``None`` values are skipped so unset CLI flags keep the file value.
    """
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = data
        for key in parents:
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"Unknown config field: {dotted}")
        node[leaf] = value
    return type(config).model_validate(data)


def export_run_config(config: RunConfig, path: Path) -> None:
    """Write a config back to YAML (or JSON for ``.json`` paths)."""
    data = config.model_dump(mode="json")
    with open(path, "w") as f:
        if Path(path).suffix.lower() == ".json":
            json.dump(data, f, indent=2, sort_keys=True)
        else:
            yaml.safe_dump(data, stream=f, default_flow_style=False, sort_keys=True)


def config_hash(config: RunConfig) -> str:
    """First 12 hex digits of the sha256 of the canonical JSON dump, ``out_dir`` excluded."""
    canonical = json.dumps(config.model_dump(mode="json", exclude={"out_dir"}), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def molecule_record(mol: ToyMolecule) -> dict[str, Any]:
    """JSON record: atom count, type codes, charges, ``[i, j, order]`` bonds, positions."""
    rows, cols = bond_pairs(mol.n_atoms)
    return {
        "n": mol.n_atoms,
        "atom_types": mol.atom_types.tolist(),
        "charges": mol.charges.tolist(),
        "bonds": [
            [int(rows[k]), int(cols[k]), int(mol.bond_orders[k])]
            for k in np.flatnonzero(mol.bond_orders)
        ],
        "positions": mol.positions.tolist(),
    }


def molecule_from_record(record: dict[str, Any]) -> ToyMolecule:
    n_atoms = int(record["n"])
    matrix = np.zeros((n_atoms, n_atoms), dtype=np.int64)
    for i, j, order in record["bonds"]:
        matrix[i, j] = matrix[j, i] = order
    rows, cols = bond_pairs(n_atoms)
    return ToyMolecule(
        atom_types=record["atom_types"],
        charges=record["charges"],
        bond_orders=matrix[rows, cols],
        positions=record["positions"],
    )


def joint_counts(dataset: Dataset) -> np.ndarray:
    """Molecule counts per (n_atoms, bin), rows ``MIN_ATOMS..MAX_ATOMS``."""
    return np.rint(dataset.joint_nc * len(dataset)).astype(np.int64)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Write molecules as JSON lines plus a ``.meta.json`` sidecar.

    The sidecar carries the bin edges and the joint (n_atoms, bin) count table.
    """
    path = Path(path)
    with open(path, "w") as f:
        for mol, prop in zip(dataset.molecules, dataset.properties, strict=True):
            f.write(json.dumps({**molecule_record(mol), "property": float(prop)}) + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "count": len(dataset),
        "seed": dataset.seed,
        "bin_edges": dataset.bin_edges.tolist(),
        "joint_counts": {
            "n_atoms": list(range(MIN_ATOMS, MAX_ATOMS + 1)),
            "counts": joint_counts(dataset).tolist(),
        },
    }
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=2)
    logger.info(f"Wrote {len(dataset)} molecules to {path}")


def load_dataset(path: Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`; properties are recomputed.

    Raises:
        ConfigError: On a format version mismatch, or when the molecules do not
            reproduce the sidecar's joint count table
    """
    path = Path(path)
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"Unsupported dataset format version in {_sidecar(path)}")
    with open(path) as f:
        molecules = [molecule_from_record(json.loads(line)) for line in f if line.strip()]
    logger.debug(f"Loaded {len(molecules)} molecules from {path}")
    dataset = Dataset.from_molecules(
        molecules, bin_edges=np.asarray(meta["bin_edges"]), seed=meta.get("seed")
    )
    expected = np.asarray(meta["joint_counts"]["counts"], dtype=np.int64)
    if not np.array_equal(joint_counts(dataset), expected):
        raise ConfigError(f"{path} does not match the joint (n, bin) table in {_sidecar(path)}")
    return dataset


def save_models(bundle: ModelBundle, path: Path) -> None:
    """Persist every fitted model of ``bundle`` as one versioned JSON document."""
    state = {
        "format_version": FORMAT_VERSION,
        "posterior": bundle.posterior.to_state(),
        "velocity": bundle.velocity.to_state(),
        "guides": {name: guide_state(guide) for name, guide in bundle.guides.items()},
        "mg": bundle.mg.to_state() if bundle.mg is not None else None,
    }
    with open(path, "w") as f:
        json.dump(state, f)
    logger.info(f"Wrote model bundle to {path}")


def load_models(path: Path, dataset: Dataset) -> ModelBundle:
    """Rebuild a :class:`ModelBundle` fitted on ``dataset``."""
    with open(path) as f:
        state = json.load(f)
    if state.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"Unsupported model bundle version in {path}")
    posterior = EmpiricalPosterior.from_state(state["posterior"], dataset)
    velocity = GaussianVelocityModel.from_state(state["velocity"])
    mg = None
    if state.get("mg") is not None:
        mg = MGModel.from_state(state["mg"], dataset, velocity, posterior)
    return ModelBundle(
        dataset=dataset,
        posterior=posterior,
        velocity=velocity,
        guides={name: guide_from_state(g, dataset) for name, g in state["guides"].items()},
        mg=mg,
    )


def write_samples(
    samples: Sequence[GeneratedMolecule], path: Path, config_hash: str, seed: int
) -> None:
    """JSON lines of generated molecules with target, config hash and seed."""
    with open(path, "w") as f:
        for index, (mol, target) in enumerate(samples):
            record = {
                **molecule_record(mol),
                "target": float(target),
                "index": index,
                "config_hash": config_hash,
                "seed": seed,
            }
            f.write(json.dumps(record) + "\n")


def load_samples(path: Path) -> list[GeneratedMolecule]:
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    return [GeneratedMolecule(molecule_from_record(r), float(r["target"])) for r in records]


def write_table(frame: pd.DataFrame, path: Path, config_hash: str, seed: int) -> None:
    """CSV output carrying provenance columns on every row."""
    frame = frame.assign(config_hash=config_hash, seed=seed)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")


__all__ = [
    "BenchmarkConfig",
    "DatasetConfig",
    "GuidanceConfig",
    "GuideConfig",
    "MGTrainingConfig",
    "ModelConfig",
    "RunConfig",
    "SamplingConfig",
    "TuneConfig",
    "apply_overrides",
    "config_hash",
    "export_run_config",
    "joint_counts",
    "load_dataset",
    "load_models",
    "load_run_config",
    "load_samples",
    "molecule_from_record",
    "molecule_record",
    "save_dataset",
    "save_models",
    "write_samples",
    "write_table",
]
