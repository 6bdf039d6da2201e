"""Masking CTMC: rate rows, Euler transitions and discrete guidance formats.

A rate row for a slot with alphabet size ``K`` has ``K + 1`` entries, the last
one being the mask token ``M``. The entry at the current token ``x_t`` holds the
diagonal, always ``-sum`` of the off-diagonal entries. All functions broadcast
over leading batch dimensions.
"""

import logging
from typing import Literal

import numpy as np
from scipy.special import softmax

from flowguide.errors import DegenerateDistribution

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

GuidanceKind = Literal["linear", "log"]
DiscreteFormat = Literal["linear_prob", "log_prob", "linear_rate", "log_rate"]
DISCRETE_FORMATS: tuple[DiscreteFormat, ...] = (
    "linear_prob",
    "log_prob",
    "linear_rate",
    "log_rate",
)


def split_format(fmt: DiscreteFormat) -> tuple[GuidanceKind, Literal["prob", "rate"]]:
    """``"log_rate"`` -> ``("log", "rate")``."""
    kind, target = fmt.split("_")
    if kind not in ("linear", "log") or target not in ("prob", "rate"):
        raise ValueError(f"Unknown discrete guidance format: {fmt!r}")
    return kind, target  # type: ignore[return-value]


def _off_diagonal(rows: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Boolean mask that is False at the current-token entry of each row."""
    mask = np.ones(rows.shape, dtype=bool)
    np.put_along_axis(mask, np.asarray(x_t)[..., None], False, axis=-1)
    return mask


def _set_diagonal(rows: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    index = np.asarray(x_t)[..., None]
    np.put_along_axis(rows, index, 0.0, axis=-1)
    np.put_along_axis(rows, index, -rows.sum(axis=-1, keepdims=True), axis=-1)
    return rows


def rate_from_posterior(
    p1t: np.ndarray, x_t: np.ndarray | int, t: float, eta: float = 0.0
) -> np.ndarray:
    """Rate rows of the masking process with remasking stochasticity ``eta``.

    Masked slots unmask towards ``a`` at ``p1t(a) (1 + eta t) / (1 - t)``;
    unmasked slots remask at rate ``eta`` and never jump between real tokens.
    """
    if t >= 1.0:
        raise ValueError(f"Rates are undefined at t={t} >= 1")
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    p1t = np.asarray(p1t, dtype=np.float64)
    x_t = np.asarray(x_t)
    n_real = p1t.shape[-1]
    masked = (x_t == n_real)[..., None]

    rows = np.zeros(p1t.shape[:-1] + (n_real + 1,), dtype=np.float64)
    rows[..., :n_real] = np.where(masked, p1t * ((1.0 + eta * t) / (1.0 - t)), 0.0)
    rows[..., n_real] = np.where(masked[..., 0], 0.0, eta)
    return _set_diagonal(rows, x_t)


def transition_probs(x_t: np.ndarray | int, rows: np.ndarray, dt: float) -> np.ndarray:
    """Euler transition ``delta + R dt``; a negative stay probability is clamped."""
    x_t = np.asarray(x_t)
    index = x_t[..., None]
    probs = np.clip(rows * dt, 0.0, None)
    stay = 1.0 + np.take_along_axis(rows, index, axis=-1) * dt
    np.put_along_axis(probs, index, np.clip(stay, 0.0, None), axis=-1)
    return probs / probs.sum(axis=-1, keepdims=True)


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw with caller-supplied uniforms in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    return (cdf <= np.asarray(u)[..., None]).sum(axis=-1)


def step(
    x_t: np.ndarray | int, row: np.ndarray, dt: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample the token(s) at ``t + dt`` given rate row(s) at ``t``."""
    probs = transition_probs(x_t, row, dt)
    return sample_categorical(probs, rng.random(probs.shape[:-1]))


def guide_prob(
    p_uncond: np.ndarray,
    p_cond: np.ndarray,
    w: float,
    kind: GuidanceKind,
    strict: bool = False,
) -> np.ndarray:
    """Guided categorical from an unconditional and a conditional one.

    ``linear``: ``(1 - w) p_u + w p_c`` clamped to the simplex.
    ``log``: ``exp((1 - w) log p_u + w log p_c)`` renormalized.
    """
    if w < 0:
        raise ValueError(f"Guidance weight must be >= 0, got {w}")
    p_uncond = np.asarray(p_uncond, dtype=np.float64)
    p_cond = np.asarray(p_cond, dtype=np.float64)
    if w == 1.0:
        return p_cond.copy()
    if w == 0.0:
        return p_uncond.copy()

    if kind == "linear":
        raw = np.clip((1.0 - w) * p_uncond + w * p_cond, 0.0, None)
        total = raw.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            guided = raw / total
    elif kind == "log":
        logits = (1.0 - w) * np.log(np.maximum(p_uncond, PROB_FLOOR)) + w * np.log(
            np.maximum(p_cond, PROB_FLOOR)
        )
        with np.errstate(over="ignore", under="ignore"):
            total = np.exp(logits).sum(axis=-1, keepdims=True)
        guided = softmax(logits, axis=-1)
    else:
        raise ValueError(f"Unknown guidance kind: {kind!r}")

    degenerate = ~np.isfinite(guided).all(axis=-1) | (total[..., 0] <= 0)
    if degenerate.any():
        if strict:
            raise DegenerateDistribution(
                f"{int(degenerate.sum())} guided distributions lost all mass at w={w}"
            )
        logger.debug(
            f"{int(degenerate.sum())} degenerate guided distributions at w={w}, "
            "falling back to the conditional"
        )
        guided = np.where(degenerate[..., None], p_cond, guided)
    return guided


def guide_rate(
    r_uncond: np.ndarray,
    r_cond: np.ndarray,
    w: float,
    kind: GuidanceKind,
    x_t: np.ndarray | int,
) -> np.ndarray:
    """Guided rate rows; the diagonal is recomputed for conservation.

    ``log`` floors one-sided zeros at 1e-12 before exponentiation, while entries
    that are zero in both rows stay exactly zero.
    """
    if w < 0:
        raise ValueError(f"Guidance weight must be >= 0, got {w}")
    r_uncond = np.asarray(r_uncond, dtype=np.float64)
    r_cond = np.asarray(r_cond, dtype=np.float64)
    if w == 1.0:
        return r_cond.copy()
    if w == 0.0:
        return r_uncond.copy()

    x_t = np.asarray(x_t)
    off = _off_diagonal(r_uncond, x_t)
    if kind == "linear":
        guided = np.clip((1.0 - w) * r_uncond + w * r_cond, 0.0, None)
    elif kind == "log":
        structural_zero = (r_uncond <= 0) & (r_cond <= 0)
        guided = np.exp(
            w * np.log(np.maximum(r_cond, PROB_FLOOR))
            + (1.0 - w) * np.log(np.maximum(r_uncond, PROB_FLOOR))
        )
        guided = np.where(structural_zero, 0.0, guided)
    else:
        raise ValueError(f"Unknown guidance kind: {kind!r}")
    guided = np.where(off, guided, 0.0)
    return _set_diagonal(guided, x_t)


def predictor_guide_rate(
    rows: np.ndarray, ratios: np.ndarray, w: float, x_t: np.ndarray | int
) -> np.ndarray:
    """Tilt off-diagonal rates by ``ratio ** w`` (low-temperature predictor guidance).

    ``ratios[..., j]`` is ``p(y | x_t with jump to j) / p(y | x_t)``.
    """
    if w < 0:
        raise ValueError(f"Guidance weight must be >= 0, got {w}")
    rows = np.asarray(rows, dtype=np.float64)
    x_t = np.asarray(x_t)
    tilt = np.power(np.maximum(np.asarray(ratios, dtype=np.float64), PROB_FLOOR), w)
    guided = np.where(_off_diagonal(rows, x_t), rows * tilt, 0.0)
    return _set_diagonal(guided, x_t)
