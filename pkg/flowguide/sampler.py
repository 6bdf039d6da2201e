"""Hybrid guided sampling loop over positions and the three discrete modalities."""

import logging
import os
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from flowguide.ctmc import (
    DiscreteFormat,
    guide_prob,
    guide_rate,
    predictor_guide_rate,
    rate_from_posterior,
    sample_categorical,
    split_format,
    transition_probs,
)
from flowguide.denoisers import (
    DEFAULT_GUIDES,
    EmpiricalPosterior,
    GaussianVelocityModel,
    GuideModel,
    GuideModelSpec,
    MGModel,
    NoisyStateClassifier,
    bins_to_array,
    build_guide,
    gaussian_velocity,
)
from flowguide.errors import ConfigError
from flowguide.flowcore import (
    MASK_TOKENS,
    MODALITIES,
    TimeGrid,
    centered_gaussian,
    remove_mean,
    slot_layout,
)
from flowguide.toymol import Dataset, ToyMolecule

logger = logging.getLogger(__name__)

Method = Literal["vanilla", "cfg", "ag", "mg", "pg"]
METHODS: tuple[Method, ...] = ("vanilla", "cfg", "ag", "mg", "pg")

# Denoiser evaluations per integration step.
FORWARD_PASSES: dict[str, int] = {"vanilla": 1, "cfg": 2, "ag": 2, "mg": 1, "pg": 2}

WEIGHT_NAMES = ("positions", *MODALITIES)


def _get_env_int(name: str, default: int, min_value: int = 1) -> int:
    """Get integer from environment variable, or return default."""
    value = os.environ.get(name)
    if value is not None:
        try:
            parsed = int(value)
            if parsed < min_value:
                logger.warning(
                    f"Value for {name} ({parsed}) below minimum ({min_value}), "
                    f"using {min_value}"
                )
                return min_value
            return parsed
        except ValueError:
            logger.warning(f"Invalid value for {name}: {value!r}, using default {default}")
    return default


class GuidanceSpec(BaseModel):
    """Guidance method, discrete format and per-modality weights."""

    model_config = ConfigDict(frozen=True)

    method: Method = Field(default="vanilla", description="Guidance method")
    discrete_format: DiscreteFormat = Field(
        default="log_prob", description="Where and how discrete guidance is applied"
    )
    weights: tuple[float, ...] = Field(
        default=(1.0, 1.0),
        description="(w_continuous, w_discrete) or (w_pos, w_atoms, w_charges, w_bonds)",
    )
    ag_guide: GuideModelSpec = Field(
        default=DEFAULT_GUIDES[0], description="Degraded guide used by autoguidance"
    )
    mg_weight: float = Field(
        default=1.5, ge=0.0, description="Guidance weight embedded in the MG model input"
    )

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) not in (2, 4):
            raise ValueError(f"Expected 2 or 4 guidance weights, got {len(value)}")
        if any(w < 0 for w in value):
            raise ValueError(f"Guidance weights must be >= 0, got {value}")
        return tuple(float(w) for w in value)

    def modality_weights(self) -> dict[str, float]:
        """Weight per modality; vanilla and mg ignore the configured weights."""
        if self.method in ("vanilla", "mg"):
            return dict.fromkeys(WEIGHT_NAMES, 1.0)
        if len(self.weights) == 2:
            return {"positions": self.weights[0], **dict.fromkeys(MODALITIES, self.weights[1])}
        return dict(zip(WEIGHT_NAMES, self.weights, strict=True))

    @property
    def forward_passes(self) -> int:
        return FORWARD_PASSES[self.method]


class SampleRequest(BaseModel):
    """How many molecules to draw, on which grid, and under which condition."""

    count: int = Field(default=1000, ge=1, description="Number of molecules")
    grid: TimeGrid = Field(default_factory=TimeGrid, description="Integration grid")
    seed: int = Field(default=0, description="Base seed; molecule i uses (seed, i)")
    condition: Literal["joint", "target"] = Field(
        default="joint", description="Draw (n, c) from the dataset joint, or fix c"
    )
    target: float | None = Field(default=None, description="Target property for 'target'")
    eta: float = Field(default=0.0, ge=0.0, description="Remasking stochasticity")

    @model_validator(mode="after")
    def _check_target(self) -> "SampleRequest":
        if self.condition == "target" and self.target is None:
            raise ValueError("condition='target' requires a target value")
        return self


class ModelBundle(NamedTuple):
    """Every fitted model the sampler may consult, all fitted on ``dataset``."""

    dataset: Dataset
    posterior: EmpiricalPosterior
    velocity: GaussianVelocityModel
    guides: dict[str, GuideModel]
    mg: MGModel | None = None

    def guide_for(self, spec: GuideModelSpec) -> GuideModel:
        guide = self.guides.get(spec.name)
        if guide is None or guide.spec != spec:
            guide = build_guide(self.dataset, spec)
            self.guides[spec.name] = guide
        return guide


class GeneratedMolecule(NamedTuple):
    molecule: ToyMolecule
    target: float


def _blend(anchor: np.ndarray, cond: np.ndarray, w: float) -> np.ndarray:
    """``(1 - w) anchor + w cond`` with exact endpoints."""
    if w == 1.0:
        return cond
    if w == 0.0:
        return anchor
    return (1.0 - w) * anchor + w * cond


class GuidedDenoiser:
    """Guided velocity and discrete transition rows for one batch sharing ``n_atoms``.

    The "anchor" is the unconditional output for cfg/pg and the degraded guide
    for ag; vanilla and mg have none.
    """

    def __init__(self, spec: GuidanceSpec, models: ModelBundle, n_atoms: int, bins: np.ndarray):
        self.spec = spec
        self.models = models
        self.n_atoms = n_atoms
        self.bins = bins
        self.layout = slot_layout(n_atoms)
        self.weights = spec.modality_weights()
        self.kind, self.target = split_format(spec.discrete_format)
        self.guide = models.guide_for(spec.ag_guide) if spec.method == "ag" else None
        self.classifier = (
            NoisyStateClassifier(models.dataset, index=models.posterior.index)
            if spec.method == "pg"
            else None
        )
        self._mg_params = None
        if spec.method == "mg":
            if models.mg is None:
                raise ConfigError("Method 'mg' requires a trained model-guidance model")
            self._mg_params = models.mg.parameters(n_atoms, bins, spec.mg_weight, len(bins))

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        """Guided position velocity, projected to zero centre of mass."""
        n, bins, w = self.n_atoms, self.bins, self.weights["positions"]
        method = self.spec.method
        if method == "mg":
            mean, variance, _ = self._mg_params
            u = gaussian_velocity(x, t, mean, variance)
        elif method == "vanilla":
            u = self.models.velocity.velocity_batch(x, t, n, bins)
        else:
            u_cond = self.models.velocity.velocity_batch(x, t, n, bins)
            if method == "ag":
                u_anchor = self.guide.velocity.velocity_batch(x, t, n, bins)
            else:
                u_anchor = self.models.velocity.velocity_batch(x, t, n, None)
            u = _blend(u_anchor, u_cond, w)
        return remove_mean(u, n)

    def posteriors(self, tokens: np.ndarray) -> tuple[np.ndarray | None, np.ndarray, np.ndarray | None]:
        """(anchor, conditional, predictor ratios) as flat ``(B, n_categories)`` arrays."""
        n, bins = self.n_atoms, self.bins
        posterior = self.models.posterior
        method = self.spec.method
        if method == "vanilla":
            return None, posterior.probabilities(n, tokens, bins), None
        if method == "mg":
            _, _, logits = self._mg_params
            return None, self.models.mg.probabilities_batch(n, tokens, bins, logits), None
        if method == "cfg":
            p_uncond, p_cond, _ = posterior.conditional_pair(n, tokens, bins)
            return p_uncond, p_cond, None
        if method == "ag":
            return (
                self.guide.posterior.probabilities(n, tokens, bins),
                posterior.probabilities(n, tokens, bins),
                None,
            )
        p_uncond = posterior.probabilities(n, tokens, None)
        return p_uncond, p_uncond, self.classifier.ratios(n, tokens, bins)

    def rows(self, tokens: np.ndarray, t: float, eta: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Guided rate rows ``(B, slots, K + 1)`` and current tokens per modality."""
        anchor, cond, ratios = self.posteriors(tokens)
        out = {}
        for m in MODALITIES:
            x_m = tokens[:, self.layout.slices[m]]
            w = self.weights[m]
            p_c = self.layout.per_slot(cond, m)
            if anchor is None:
                rows = rate_from_posterior(p_c, x_m, t, eta)
            elif ratios is not None:
                rho = self.layout.per_slot(ratios, m)
                # The mask column is never tilted.
                rho = np.concatenate([rho, np.ones(rho.shape[:-1] + (1,))], axis=-1)
                rows = predictor_guide_rate(rate_from_posterior(p_c, x_m, t, eta), rho, w, x_m)
            elif self.target == "prob":
                p_a = self.layout.per_slot(anchor, m)
                rows = rate_from_posterior(guide_prob(p_a, p_c, w, self.kind), x_m, t, eta)
            else:
                p_a = self.layout.per_slot(anchor, m)
                rows = guide_rate(
                    rate_from_posterior(p_a, x_m, t, eta),
                    rate_from_posterior(p_c, x_m, t, eta),
                    w,
                    self.kind,
                    x_m,
                )
            out[m] = (rows, x_m)
        return out

    def final_probs(self, tokens: np.ndarray) -> dict[str, np.ndarray]:
        """Guided posterior per modality, ``(B, slots, K)``, used for the terminal fill."""
        anchor, cond, ratios = self.posteriors(tokens)
        out = {}
        for m in MODALITIES:
            p_c = self.layout.per_slot(cond, m)
            w = self.weights[m]
            if anchor is None:
                out[m] = p_c
            elif ratios is not None:
                tilted = p_c * np.power(np.maximum(self.layout.per_slot(ratios, m), 1e-12), w)
                out[m] = tilted / tilted.sum(axis=-1, keepdims=True)
            else:
                out[m] = guide_prob(self.layout.per_slot(anchor, m), p_c, w, self.kind)
        return out


def guided_velocity(
    spec: GuidanceSpec,
    models: ModelBundle,
    x: np.ndarray,
    t: float,
    key: tuple[int, int | None],
) -> np.ndarray:
    """Guided velocity for ``x`` of shape ``(3n,)`` or ``(B, 3n)`` at condition ``key``."""
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    denoiser = GuidedDenoiser(spec, models, key[0], bins_to_array(key[1], len(batch)))
    u = denoiser.velocity(batch, t)
    return u.reshape(x.shape)


def guided_discrete_step(
    spec: GuidanceSpec,
    models: ModelBundle,
    revealed: np.ndarray,
    slot: tuple[str, int],
    t: float,
    dt: float,
    rng: np.random.Generator,
    key: tuple[int, int | None],
    eta: float = 0.0,
) -> int:
    """Sample the token of one slot at ``t + dt`` given the full token state at ``t``."""
    n_atoms, bin_index = key
    tokens = np.atleast_2d(np.asarray(revealed, dtype=np.int64))
    denoiser = GuidedDenoiser(spec, models, n_atoms, bins_to_array(bin_index, 1))
    modality, index = slot
    x_m = tokens[0, denoiser.layout.slices[modality]]
    if eta == 0.0 and x_m[index] != MASK_TOKENS[modality]:
        raise ValueError(f"Slot {slot} is already unmasked and eta=0")
    rows, x_m = denoiser.rows(tokens, t, eta)[modality]
    probs = transition_probs(x_m[0, index], rows[0, index], dt)
    return int(sample_categorical(probs, rng.random()))


def _sample_chunk(
    spec: GuidanceSpec,
    models: ModelBundle,
    req: SampleRequest,
    n_atoms: int,
    targets: np.ndarray,
    rngs: list[np.random.Generator],
) -> list[ToyMolecule]:
    layout = slot_layout(n_atoms)
    grid = req.grid
    bins = np.asarray(models.dataset.bin_of(targets), dtype=np.int64)
    denoiser = GuidedDenoiser(spec, models, n_atoms, bins)

    x = np.stack([centered_gaussian(rng, n_atoms) for rng in rngs])
    uniforms = np.stack([rng.random((grid.steps, layout.n_slots)) for rng in rngs])
    tokens = layout.all_masked(len(rngs))

    for k, t in enumerate(grid.times):
        u = denoiser.velocity(x, t)
        rows = denoiser.rows(tokens, t, req.eta)
        updated = tokens.copy()
        for m, (row, x_m) in rows.items():
            probs = transition_probs(x_m, row, grid.dt)
            updated[:, layout.slices[m]] = sample_categorical(
                probs, uniforms[:, k, layout.slices[m]]
            )
        x = x + u * grid.dt
        tokens = updated

    masked = tokens == layout.mask_tokens[None, :]
    if masked.any():
        logger.debug(f"Filling {int(masked.sum())} residual masks by argmax (n={n_atoms})")
        final = denoiser.final_probs(tokens)
        for m in MODALITIES:
            sl = layout.slices[m]
            tokens[:, sl] = np.where(masked[:, sl], final[m].argmax(axis=-1), tokens[:, sl])

    return [
        ToyMolecule.from_codes(
            row[layout.slices["atom_types"]],
            row[layout.slices["charges"]],
            row[layout.slices["bonds"]],
            pos,
        )
        for row, pos in zip(tokens, x, strict=True)
    ]


def sample(spec: GuidanceSpec, models: ModelBundle, req: SampleRequest) -> list[GeneratedMolecule]:
    """Generate ``req.count`` molecules with their targets.

    Molecule ``i`` owns the generator ``default_rng([seed, i])``, which draws its
    condition, then its base positions, then one uniform per slot and step.
    Molecules sharing an atom count are integrated together in chunks of
    ``FLOWGUIDE_CHUNK_SIZE``; results do not depend on the chunking.

    Args:
        spec: Guidance configuration
        models: Fitted models
        req: Count, grid, seed, condition mode and eta

    Returns:
        Generated molecules in index order, each with its target property
    """
    dataset = models.dataset
    rngs = [np.random.default_rng([req.seed, i]) for i in range(req.count)]
    n_atoms = np.empty(req.count, dtype=np.int64)
    targets = np.empty(req.count, dtype=np.float64)
    for i, rng in enumerate(rngs):
        if req.condition == "joint":
            n_atoms[i], targets[i] = dataset.draw_condition(rng)
        else:
            n_atoms[i], targets[i] = dataset.draw_n_atoms(rng, req.target), req.target

    chunk_size = _get_env_int("FLOWGUIDE_CHUNK_SIZE", 512)
    molecules: list[ToyMolecule | None] = [None] * req.count
    chunks = [
        (int(n), rows[start : start + chunk_size])
        for n in np.unique(n_atoms)
        for rows in [np.flatnonzero(n_atoms == n)]
        for start in range(0, len(rows), chunk_size)
    ]
    for n, rows in tqdm(chunks, desc=f"Sampling ({spec.method})", leave=False):
        generated = _sample_chunk(spec, models, req, n, targets[rows], [rngs[i] for i in rows])
        for i, mol in zip(rows, generated, strict=True):
            molecules[i] = mol
    return [GeneratedMolecule(mol, float(c)) for mol, c in zip(molecules, targets, strict=True)]
