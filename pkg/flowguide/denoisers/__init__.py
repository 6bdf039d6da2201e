"""Tabular denoisers: closed-form velocities, exact posteriors and guidance models."""

from .classifier import NoisyStateClassifier, classify, predictor_ratios
from .common import NO_BIN, ConditionKey, DenoiserBase, MatchCounts, StratumIndex, bins_to_array
from .guide import (
    DEFAULT_GUIDES,
    GuideModel,
    GuideModelSpec,
    build_guide,
    guide_from_state,
    guide_state,
    subsample,
)
from .model_guidance import (
    MGExample,
    MGModel,
    guidance_scale,
    mg_target,
    train_mg,
    uniform_weight_sampler,
    weight_bucket,
)
from .posterior import EmpiricalPosterior, held_out_nll, posterior
from .velocity import (
    GaussianVelocityModel,
    fit_velocity_model,
    gaussian_posterior_means,
    gaussian_velocity,
    velocity,
    velocity_mean_jacobian,
)

__all__ = [
    "NO_BIN",
    "ConditionKey",
    "DenoiserBase",
    "MatchCounts",
    "StratumIndex",
    "bins_to_array",
    "GaussianVelocityModel",
    "fit_velocity_model",
    "gaussian_posterior_means",
    "gaussian_velocity",
    "velocity",
    "velocity_mean_jacobian",
    "EmpiricalPosterior",
    "posterior",
    "held_out_nll",
    "NoisyStateClassifier",
    "classify",
    "predictor_ratios",
    "GuideModelSpec",
    "GuideModel",
    "DEFAULT_GUIDES",
    "build_guide",
    "subsample",
    "guide_state",
    "guide_from_state",
    "MGExample",
    "MGModel",
    "guidance_scale",
    "mg_target",
    "train_mg",
    "uniform_weight_sampler",
    "weight_bucket",
]
