"""Exception types raised across flowguide."""

from collections.abc import Sequence


class FlowGuideError(Exception):
    """Base class for every error raised by flowguide."""


class ConfigError(FlowGuideError):
    """Invalid or inconsistent run configuration."""


class ConstructionFailure(FlowGuideError):
    """Dataset generation could not build a valid molecule."""


class EmptyDataset(FlowGuideError):
    """A model was fitted on a dataset without molecules."""


class UnresolvedKey(FlowGuideError, KeyError):
    """No fitted entry exists for the requested (n_atoms, bin) key."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class DegenerateDistribution(FlowGuideError):
    """Guided probability mass vanished before renormalization."""


class ObjectiveFailure(FlowGuideError):
    """The Bayesian optimization objective failed at a given point."""

    def __init__(self, weights: Sequence[float], message: str = ""):
        self.weights = [float(w) for w in weights]
        super().__init__(
            f"Objective failed at weights {self.weights}"
            + (f": {message}" if message else "")
        )


class EmptyInput(FlowGuideError):
    """A metric was asked to aggregate zero samples."""


class AllZero(FlowGuideError):
    """Entropy requested for counts that sum to zero."""


class DegenerateRange(FlowGuideError):
    """Radar scaling range has max <= min."""


class TrainingDivergence(FlowGuideError):
    """Model-guidance training loss blew up."""


__all__ = [
    "AllZero",
    "ConfigError",
    "ConstructionFailure",
    "DegenerateDistribution",
    "DegenerateRange",
    "EmptyDataset",
    "EmptyInput",
    "FlowGuideError",
    "ObjectiveFailure",
    "TrainingDivergence",
    "UnresolvedKey",
]
