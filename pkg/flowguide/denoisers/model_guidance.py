"""Model guidance: bake the guidance correction into the training target.

Every ``(n_atoms, bin)`` owns two parameter blocks, each holding a mean for the
closed-form Gaussian velocity and a logit tilt added to the exact empirical
posterior of every discrete slot:

- the *base* block serves the conditional output at weight 1;
- the *guide* block is shared by all guided weight buckets and enters scaled
  by the bucket's centre weight.

The unconditional output ``(n_atoms, None)`` has a base block only. Training
regresses the velocity on ``u_t + w * sg(u_ema(c) - u_ema(none))`` and fits the
logits by cross-entropy against the analogous corrected one-hot target, where
``sg`` is the stop-gradient: the correction comes from EMA parameters and never
receives gradients.
"""

import logging
from collections.abc import Callable
from typing import Any, NamedTuple

import numpy as np
from scipy.special import log_softmax
from tqdm import tqdm

from flowguide.errors import EmptyDataset, TrainingDivergence, UnresolvedKey
from flowguide.flowcore import (
    MODALITIES,
    MaskedSequence,
    SlotLayout,
    centered_gaussian,
    mask_interpolate,
    slot_layout,
)
from flowguide.toymol import Dataset

from .common import NO_BIN, DenoiserBase, bins_to_array
from .posterior import EmpiricalPosterior
from .velocity import GaussianVelocityModel, fit_velocity_model, gaussian_velocity, velocity_mean_jacobian

logger = logging.getLogger(__name__)

# Decay 0.9999 and a 10k-step warmup, both scaled to a ~10x shorter toy budget.
EMA_DECAY = 0.999
WARMUP_STEPS = 1000
WARMUP_FRACTION = 0.1
P_UNCOND = 0.1
P_GUIDED = 0.2
GUIDED_WEIGHT_RANGE = (1.0, 2.0)
N_GUIDED_BUCKETS = 8
DIVERGENCE_FACTOR = 10.0
LOSS_WINDOW = 500
LOG_FLOOR = 1e-12

BASE = "base"
GUIDE = "guide"

MGKey = tuple[int, int | None, int]
BlockId = tuple[int, int | None, str]


def weight_bucket(w: float) -> int:
    """Quantize a guidance weight: 0 (unconditional), 1 (w=1), 2..9 over (1, 2]."""
    if w < 0.5:
        return 0
    if w <= 1.0:
        return 1
    width = (GUIDED_WEIGHT_RANGE[1] - GUIDED_WEIGHT_RANGE[0]) / N_GUIDED_BUCKETS
    return 2 + min(int((w - 1.0) / width), N_GUIDED_BUCKETS - 1)


def guidance_scale(bucket: int) -> float:
    """Coefficient of the shared guide block: the bucket's centre weight, 0 below bucket 2."""
    if bucket < 2:
        return 0.0
    width = (GUIDED_WEIGHT_RANGE[1] - GUIDED_WEIGHT_RANGE[0]) / N_GUIDED_BUCKETS
    return GUIDED_WEIGHT_RANGE[0] + (bucket - 1.5) * width


def mg_target(
    u_t: np.ndarray, w: float, ema_cond: np.ndarray, ema_uncond: np.ndarray
) -> np.ndarray:
    """Guided regression target ``u_t + w (ema_cond - ema_uncond)``."""
    return u_t + w * (ema_cond - ema_uncond)


def default_warmup(total_steps: int) -> int:
    return min(WARMUP_STEPS, int(WARMUP_FRACTION * total_steps))


def _slot_softmax(layout: SlotLayout, logits: np.ndarray, log: bool = False) -> np.ndarray:
    out = np.empty_like(logits)
    for m in MODALITIES:
        block = layout.per_slot(logits, m)
        normalized = log_softmax(block, axis=-1)
        out[:, layout.category_slices[m]] = (
            normalized if log else np.exp(normalized)
        ).reshape(len(logits), -1)
    return out


def _slot_renormalize(layout: SlotLayout, probs: np.ndarray) -> np.ndarray:
    out = np.empty_like(probs)
    for m in MODALITIES:
        block = layout.per_slot(probs, m)
        block = block / block.sum(axis=-1, keepdims=True)
        out[:, layout.category_slices[m]] = block.reshape(len(probs), -1)
    return out


class MGExample(NamedTuple):
    """One training draw: a data molecule, its conditioning and its noisy state."""

    n_atoms: int
    bin: int | None
    w: float
    t: float
    x0: np.ndarray
    x1: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray

    @property
    def key(self) -> MGKey:
        return (self.n_atoms, self.bin, weight_bucket(self.w))

    @property
    def x_t(self) -> np.ndarray:
        return (1.0 - self.t) * self.x0 + self.t * self.x1


class MGModel(DenoiserBase):
    """Tabular model-guidance network with online and EMA parameter vectors."""

    kind = "model_guidance"

    keys: list[BlockId]
    online: np.ndarray
    ema: np.ndarray

    def __init__(
        self,
        dataset: Dataset,
        velocity_model: GaussianVelocityModel,
        posterior: EmpiricalPosterior,
        ema_decay: float = EMA_DECAY,
    ):
        self.dataset = dataset
        self.velocity_model = velocity_model
        self.posterior = posterior
        self.ema_decay = ema_decay
        self.keys = []
        self._blocks: dict[BlockId, tuple[int, int, int]] = {}
        self._variances: dict[tuple[int, int | None], np.ndarray] = {}
        initial: list[np.ndarray] = []
        offset = 0
        for n_atoms in dataset.atom_counts():
            n_categories = slot_layout(n_atoms).n_categories
            blocks: list[BlockId] = [(n_atoms, None, BASE)] + [
                (n_atoms, b, role) for b in range(dataset.n_bins) for role in (BASE, GUIDE)
            ]
            for block_id in blocks:
                resolved = velocity_model.resolve(n_atoms, block_id[1])
                mean = velocity_model.means[resolved]
                self.keys.append(block_id)
                self._variances[block_id[:2]] = velocity_model.variances[resolved]
                self._blocks[block_id] = (offset, offset + len(mean), offset + len(mean) + n_categories)
                offset += len(mean) + n_categories
                if block_id[2] == BASE:
                    initial.extend([mean, np.zeros(n_categories)])
                else:
                    initial.append(np.zeros(len(mean) + n_categories))
        self.online = np.concatenate(initial) if initial else np.zeros(0)
        self.ema = self.online.copy()
        self._ema_step = {block_id: 0 for block_id in self.keys}
        self._latest_step = 0

    @property
    def n_parameters(self) -> int:
        return len(self.online)

    def block(self, block_id: BlockId) -> tuple[int, int, int]:
        """``(start, mean end, end)`` offsets of one parameter block."""
        if block_id not in self._blocks:
            raise UnresolvedKey(f"No model-guidance parameters for block {block_id}")
        return self._blocks[block_id]

    def terms(self, key: MGKey) -> list[tuple[BlockId, float]]:
        """Parameter blocks and their coefficients making up the output for ``key``."""
        n_atoms, bin_index, bucket = key
        if bin_index is None or bucket == 0:
            base = (n_atoms, None, BASE)
            self.block(base)
            return [(base, 1.0)]
        base = (n_atoms, bin_index, BASE)
        self.block(base)
        scale = guidance_scale(bucket)
        if scale == 0.0:
            return [(base, 1.0)]
        return [(base, 1.0), ((n_atoms, bin_index, GUIDE), scale)]

    def resolve(self, n_atoms: int, bin_index: int | None, w: float) -> MGKey:
        if bin_index is None or bin_index == NO_BIN:
            return (n_atoms, None, 0)
        return (n_atoms, int(bin_index), max(1, weight_bucket(w)))

    # -- forward passes -----------------------------------------------------

    def effective(self, params: np.ndarray, key: MGKey) -> np.ndarray:
        """Combined mean and logit tilt of ``key``."""
        out = None
        for block_id, coefficient in self.terms(key):
            start, _, end = self.block(block_id)
            part = params[start:end] if coefficient == 1.0 else coefficient * params[start:end]
            out = part.copy() if out is None else out + part
        return out

    def _variance(self, key: MGKey) -> np.ndarray:
        return self._variances[self.terms(key)[0][0][:2]]

    def velocity_with(
        self, params: np.ndarray, key: MGKey, x: np.ndarray, t: float
    ) -> np.ndarray:
        mean = self.effective(params, key)[: 3 * key[0]]
        return gaussian_velocity(x, t, mean, self._variance(key))

    def probabilities_with(
        self, params: np.ndarray, key: MGKey, p_emp: np.ndarray
    ) -> np.ndarray:
        layout = slot_layout(key[0])
        tilt = self.effective(params, key)[3 * key[0] :]
        logits = np.log(np.maximum(np.atleast_2d(p_emp), LOG_FLOOR)) + tilt
        return _slot_softmax(layout, logits)

    def empirical(self, key: MGKey, states: np.ndarray) -> np.ndarray:
        bin_index = None if key[2] == 0 else key[1]
        return self.posterior.probabilities(key[0], states, bin_index)

    def parameters(
        self, n_atoms: int, bins: Any, w: float, batch: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """EMA means, variances and logit tilts stacked for a batch, ``(B, ...)``."""
        self.sync_ema()
        keys = [self.resolve(n_atoms, int(b), w) for b in bins_to_array(bins, batch)]
        vectors = [self.effective(self.ema, k) for k in keys]
        split = 3 * n_atoms
        return (
            np.stack([v[:split] for v in vectors]),
            np.stack([self._variance(k) for k in keys]),
            np.stack([v[split:] for v in vectors]),
        )

    def probabilities_batch(
        self, n_atoms: int, states: np.ndarray, bins: Any, logits: np.ndarray
    ) -> np.ndarray:
        """Tilted posteriors for a batch given stacked logit tilts from :meth:`parameters`."""
        p_emp = self.posterior.probabilities(n_atoms, states, bins)
        tilted = np.log(np.maximum(p_emp, LOG_FLOOR)) + logits
        return _slot_softmax(slot_layout(n_atoms), tilted)

    # -- training -------------------------------------------------------------

    def sync_ema(self, block_id: BlockId | None = None, step: int | None = None) -> None:
        """Bring lazily updated EMA blocks forward to ``step`` (default: latest)."""
        target = self._latest_step if step is None else step
        for b in [block_id] if block_id is not None else self.keys:
            missed = target - self._ema_step[b]
            if missed > 0:
                start, _, end = self.block(b)
                factor = self.ema_decay**missed
                self.ema[start:end] = self.online[start:end] + factor * (
                    self.ema[start:end] - self.online[start:end]
                )
                self._ema_step[b] = target

    def training_target(
        self, example: MGExample, ema: np.ndarray, correction: bool
    ) -> tuple[np.ndarray, np.ndarray]:
        """Continuous target and per-category discrete target for one example.

        Only ``ema`` enters the correction, so the target is constant with
        respect to the online parameters.
        """
        n_atoms, layout = example.n_atoms, slot_layout(example.n_atoms)
        u_t = example.x1 - example.x0
        onehot = layout.onehot(example.clean)[0].astype(np.float64)
        if not correction:
            return u_t, onehot

        x_t, t = example.x_t, example.t
        cond_key = (n_atoms, example.bin, 1)
        uncond_key = (n_atoms, None, 0)
        u_target = mg_target(
            u_t,
            example.w,
            self.velocity_with(ema, cond_key, x_t, t),
            self.velocity_with(ema, uncond_key, x_t, t),
        )
        q_cond = self.probabilities_with(ema, cond_key, self.empirical(cond_key, example.noisy))
        q_uncond = self.probabilities_with(
            ema, uncond_key, self.empirical(uncond_key, example.noisy)
        )
        q_target = np.clip(mg_target(onehot, example.w, q_cond[0], q_uncond[0]), 0.0, None)
        return u_target, _slot_renormalize(layout, q_target[None, :])[0]

    def loss_and_grad(
        self,
        example: MGExample,
        online: np.ndarray | None = None,
        ema: np.ndarray | None = None,
        correction: bool = True,
    ) -> tuple[float, np.ndarray]:
        """Loss and its gradient with respect to the full online vector."""
        online = self.online if online is None else online
        ema = self.ema if ema is None else ema
        loss, grad = self._loss_and_output_grad(example, online, ema, correction)
        full = np.zeros_like(online)
        for block_id, coefficient in self.terms(example.key):
            start, _, end = self.block(block_id)
            full[start:end] += coefficient * grad
        return loss, full

    def _loss_and_output_grad(
        self, example: MGExample, online: np.ndarray, ema: np.ndarray, correction: bool
    ) -> tuple[float, np.ndarray]:
        key = example.key
        layout = slot_layout(example.n_atoms)
        apply = correction and key[2] >= 2
        u_target, q_target = self.training_target(example, ema, apply)

        x_t, t = example.x_t, example.t
        residual = self.velocity_with(online, key, x_t, t) - u_target
        loss = 0.5 * float(residual @ residual)
        grad_mean = residual * velocity_mean_jacobian(t, self._variance(key))

        masked = example.noisy == layout.mask_tokens
        category_masked = np.repeat(masked, layout.alphabet)
        p_emp = self.empirical(key, example.noisy)
        tilt = self.effective(online, key)[3 * example.n_atoms :]
        logits = np.log(np.maximum(p_emp, LOG_FLOOR)) + tilt
        log_q = _slot_softmax(layout, logits, log=True)[0]
        loss -= float((q_target * log_q)[category_masked].sum())
        grad_logits = np.where(category_masked, np.exp(log_q) - q_target, 0.0)
        return loss, np.concatenate([grad_mean, grad_logits])

    def draw_example(
        self,
        rng: np.random.Generator,
        w_sampler: Callable[[np.random.Generator], float],
        p_uncond: float = P_UNCOND,
        p_guided: float = P_GUIDED,
    ) -> MGExample:
        index = int(rng.integers(len(self.dataset)))
        mol = self.dataset.molecules[index]
        n_atoms = mol.n_atoms
        u = rng.random()
        if u < p_uncond:
            bin_index, w = None, 0.0
        elif u < p_uncond + p_guided:
            bin_index, w = int(self.dataset.bins[index]), float(w_sampler(rng))
        else:
            bin_index, w = int(self.dataset.bins[index]), 1.0
        t = float(rng.random())
        layout = slot_layout(n_atoms)
        clean = mol.to_codes()
        noisy = layout.join(
            {
                m: mask_interpolate(MaskedSequence(seq.tokens, m), t, rng)
                for m, seq in layout.split(clean).items()
            }
        )
        return MGExample(
            n_atoms=n_atoms,
            bin=bin_index,
            w=w,
            t=t,
            x0=centered_gaussian(rng, n_atoms),
            x1=mol.positions.reshape(-1),
            clean=clean,
            noisy=noisy,
        )

    def sgd_step(self, example: MGExample, lr: float, step: int, correction: bool) -> float:
        n_atoms, bin_index = example.n_atoms, example.bin
        terms = self.terms(example.key)
        read = {block_id for block_id, _ in terms}
        read |= {block_id for block_id, _ in self.terms((n_atoms, None, 0))}
        if bin_index is not None:
            read |= {block_id for block_id, _ in self.terms((n_atoms, bin_index, 1))}
        for block_id in read:
            self.sync_ema(block_id, step - 1)

        loss, grad = self._loss_and_output_grad(example, self.online, self.ema, correction)
        for block_id, coefficient in terms:
            start, _, end = self.block(block_id)
            self.online[start:end] -= lr * coefficient * grad
            self.ema[start:end] += (1.0 - self.ema_decay) * (
                self.online[start:end] - self.ema[start:end]
            )
            self._ema_step[block_id] = step
        self._latest_step = step
        return loss

    # -- serialization --------------------------------------------------------

    def to_state(self) -> dict[str, Any]:
        self.sync_ema()
        return {
            "kind": self.kind,
            "ema_decay": self.ema_decay,
            "keys": [list(k) for k in self.keys],
            "online": self.online.tolist(),
            "ema": self.ema.tolist(),
        }

    @classmethod
    def from_state(
        cls,
        state: dict[str, Any],
        dataset: Dataset,
        velocity_model: GaussianVelocityModel | None = None,
        posterior: EmpiricalPosterior | None = None,
    ) -> "MGModel":
        model = cls(
            dataset,
            velocity_model or fit_velocity_model(dataset),
            posterior or EmpiricalPosterior(dataset),
            ema_decay=state["ema_decay"],
        )
        if [list(k) for k in model.keys] != state["keys"]:
            raise ValueError("Model-guidance key layout does not match the dataset")
        model.online = np.array(state["online"], dtype=np.float64)
        model.ema = np.array(state["ema"], dtype=np.float64)
        return model


def uniform_weight_sampler(low: float = 1.0, high: float = 2.0) -> Callable[[np.random.Generator], float]:
    def sample(rng: np.random.Generator) -> float:
        return float(rng.uniform(low, high))

    return sample


def train_mg(
    dataset: Dataset,
    epochs: int = 3,
    lr: float = 0.05,
    w_sampler: Callable[[np.random.Generator], float] | None = None,
    warmup: int | float | None = None,
    ema_decay: float = EMA_DECAY,
    p_uncond: float = P_UNCOND,
    p_guided: float = P_GUIDED,
    seed: int = 0,
    velocity_model: GaussianVelocityModel | None = None,
    posterior: EmpiricalPosterior | None = None,
) -> MGModel:
    """Train a model-guidance model by single-example SGD.

    Args:
        dataset: Training molecules
        epochs: Passes over ``len(dataset)`` randomly drawn examples
        lr: SGD learning rate
        w_sampler: Draws the weight of guided examples (default Uniform[1, 2])
        warmup: Steps before the guidance correction activates; ``None`` uses
            1000 steps, capped at a tenth of the run
        ema_decay: Decay of the EMA shadow parameters
        p_uncond: Fraction of unconditional examples (weight embedded as 0)
        p_guided: Fraction of guided examples; the rest are vanilla (w=1)
        seed: Seed for example draws
        velocity_model: Closed-form fit used for variances and mean initialization
        posterior: Empirical posterior the logit tilts act on

    Returns:
        Trained MGModel with EMA parameters synchronized

    Raises:
        TrainingDivergence: If a window's mean loss exceeds 10x the first window's
    """
    if len(dataset) == 0:
        raise EmptyDataset("Cannot train model guidance on an empty dataset")
    model = MGModel(
        dataset,
        velocity_model or fit_velocity_model(dataset),
        posterior or EmpiricalPosterior(dataset),
        ema_decay=ema_decay,
    )
    sampler = w_sampler or uniform_weight_sampler(*GUIDED_WEIGHT_RANGE)
    rng = np.random.default_rng(seed)
    total_steps = epochs * len(dataset)
    if warmup is None:
        warmup = default_warmup(total_steps)
    window = min(LOSS_WINDOW, max(1, total_steps))
    reference: float | None = None
    losses: list[float] = []

    for step in tqdm(range(1, total_steps + 1), desc="Training MG", leave=False):
        example = model.draw_example(rng, sampler, p_uncond, p_guided)
        loss = model.sgd_step(example, lr, step, correction=step > warmup)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"Non-finite loss at step {step}")
        losses.append(loss)
        if len(losses) == window:
            mean_loss = float(np.mean(losses))
            losses.clear()
            if reference is None:
                reference = mean_loss
                logger.debug(f"Initial MG loss {reference:.4f}")
            elif mean_loss > DIVERGENCE_FACTOR * reference:
                raise TrainingDivergence(
                    f"Loss {mean_loss:.4f} exceeded {DIVERGENCE_FACTOR}x the initial "
                    f"{reference:.4f} at step {step}"
                )
    model.sync_ema()
    logger.info(
        f"Trained MG model for {total_steps} steps, warmup {warmup} "
        f"({model.n_parameters} parameters)"
    )
    return model
