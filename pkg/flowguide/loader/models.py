from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from flowguide.ctmc import DiscreteFormat
from flowguide.denoisers import DEFAULT_GUIDES, GuideModelSpec
from flowguide.sampler import Method

# Guide sections of a run config validate exactly like the sampler's guide specs.
GuideConfig = GuideModelSpec


class DatasetConfig(BaseModel):
    seed: int = Field(default=1, description="Generation seed")
    count: int = Field(default=5000, ge=100, description="Number of molecules to generate")
    n_bins: int = Field(default=16, ge=1, description="Equal-frequency property bins")
    path: str | None = Field(
        default=None,
        description="Existing dataset JSON-lines file; generation is skipped when set",
    )
    split: float | None = Field(
        default=None,
        gt=0.0,
        lt=1.0,
        description="Fraction kept for model fitting; the rest becomes the evaluation split",
    )


class MGTrainingConfig(BaseModel):
    enabled: bool = Field(default=True, description="Train a model-guidance model in 'fit'")
    epochs: int = Field(default=3, ge=1, description="Passes over the dataset")
    lr: float = Field(default=0.05, gt=0.0, description="SGD learning rate")
    warmup: int | None = Field(
        default=None, ge=0, description="Steps before guided targets; unset uses min(1000, 10% of steps)"
    )
    ema_decay: float = Field(default=0.999, gt=0.0, lt=1.0, description="EMA decay")
    p_uncond: float = Field(default=0.1, ge=0.0, le=1.0, description="Unconditional share")
    p_guided: float = Field(default=0.2, ge=0.0, le=1.0, description="Guided share")
    w_range: tuple[float, float] = Field(
        default=(1.0, 2.0), description="Uniform range of guided training weights"
    )
    seed: int = Field(default=0, description="Seed of the training example stream")

    @model_validator(mode="after")
    def _check_shares(self) -> "MGTrainingConfig":
        if self.p_uncond + self.p_guided > 1.0:
            raise ValueError("p_uncond + p_guided must not exceed 1")
        if not 1.0 <= self.w_range[0] <= self.w_range[1]:
            raise ValueError(f"w_range must satisfy 1 <= low <= high, got {self.w_range}")
        return self


class ModelConfig(BaseModel):
    conditional: bool = Field(default=True, description="Fit per-bin velocity entries")
    min_bin_count: int = Field(default=5, ge=1, description="Smallest bin with its own entry")
    variance_floor: float = Field(default=1e-6, gt=0.0, description="Variance lower bound")
    guides: list[GuideConfig] = Field(
        default_factory=lambda: list(DEFAULT_GUIDES),
        description="Autoguidance guide models fitted alongside the main model",
    )
    mg: MGTrainingConfig = Field(default_factory=MGTrainingConfig)


class SamplingConfig(BaseModel):
    steps: int = Field(default=100, ge=2, description="Euler steps on the time grid")
    eta: float = Field(default=0.0, ge=0.0, description="Remasking stochasticity")
    count: int = Field(default=1000, ge=1, description="Molecules per sampling run")
    seed: int = Field(default=0, description="Sampling seed")
    condition: Literal["joint", "target"] = Field(
        default="joint", description="Draw (n, c) from the dataset joint or fix a target"
    )
    target: float | None = Field(default=None, description="Target for condition='target'")


class GuidanceConfig(BaseModel):
    method: Method = Field(default="vanilla", description="Guidance method")
    discrete_format: DiscreteFormat = Field(default="log_prob", description="Discrete format")
    weights: tuple[float, ...] = Field(
        default=(1.0, 1.0), description="2 or 4 guidance weights"
    )
    ag_guide: str = Field(
        default="undertrained", description="Name of the guide model used by 'ag'"
    )
    mg_weight: float = Field(default=1.5, ge=0.0, description="Weight embedded for 'mg'")

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) not in (2, 4):
            raise ValueError(f"Expected 2 or 4 guidance weights, got {len(value)}")
        return value


class TuneConfig(BaseModel):
    n_weights: Literal[1, 2, 4] = Field(
        default=2, description="Tuned dimensions (1 for mg, 2 or 4 for the others)"
    )
    n_initial: int = Field(default=10, ge=2, description="Latin-hypercube points")
    n_iterations: int = Field(default=40, ge=0, description="EI acquisitions")
    eval_count: int = Field(default=1000, ge=1, description="Molecules per objective call")
    bounds: list[tuple[float, float]] | None = Field(
        default=None, description="Override of the per-method default bounds"
    )
    seed: int = Field(default=0, description="BO seed")


class BenchmarkConfig(BaseModel):
    methods: list[Method] = Field(
        default_factory=lambda: ["vanilla", "cfg", "ag", "mg"],
        description="Methods compared in the benchmark",
    )
    formats: list[DiscreteFormat] = Field(
        default_factory=lambda: ["linear_prob", "log_prob", "linear_rate", "log_rate"],
        description="Formats swept by sweep-formats",
    )
    sweep_weights: list[float] = Field(
        default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0],
        description="w1 and w2 grid for the wide formats",
    )
    log_rate_weights: list[float] = Field(
        default_factory=lambda: [1.0, 1.05, 1.1, 1.15, 1.2],
        description="Narrow w2 grid for log_rate",
    )
    hierarchy_weights: list[float] = Field(
        default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0],
        description="Shared w grid of the continuous/discrete/hybrid curves",
    )
    steps_ablation: list[int] = Field(
        default_factory=lambda: [100], description="Integration step counts to report"
    )
    stability_steps: int = Field(
        default=20,
        ge=2,
        description="Euler steps of the log_rate validity check; tokens unmasked per step "
        "match a molecule-scale sequence at 100 steps",
    )
    tuned_weights: dict[str, list[float]] = Field(
        default_factory=dict,
        description="Per-method weights; methods without an entry are tuned first",
    )


class RunConfig(BaseModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    models: ModelConfig = Field(default_factory=ModelConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    tune: TuneConfig = Field(default_factory=TuneConfig)
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)
    out_dir: str = Field(default="runs/default", description="Output directory")
