"""Direction-level findings and the Markdown benchmark summary."""

import logging
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
import pandas as pd
from jinja2 import Environment, StrictUndefined
from scipy.stats import wilcoxon

from flowguide.metrics import MetricReport
from flowguide.toymol import ToyMolecule, property_oracle

logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.01
LOG_RATE_VALIDITY_DROP = 0.05


class Finding(NamedTuple):
    name: str
    holds: bool
    lhs: float
    rhs: float
    p_value: float | None = None


def absolute_errors(samples: Sequence[tuple[ToyMolecule, float]]) -> np.ndarray:
    return np.array([abs(property_oracle(mol) - target) for mol, target in samples])


def paired_improvement(
    name: str,
    better: Sequence[tuple[ToyMolecule, float]],
    baseline: Sequence[tuple[ToyMolecule, float]],
) -> Finding:
    """One-sided paired Wilcoxon test that ``better`` has lower errors on shared targets."""
    a, b = absolute_errors(better), absolute_errors(baseline)
    if len(a) != len(b):
        raise ValueError(f"Paired samples differ in length: {len(a)} vs {len(b)}")
    if np.allclose(a, b):
        p_value = 1.0
    else:
        p_value = float(wilcoxon(a, b, alternative="less").pvalue)
    return Finding(name, bool(a.mean() < b.mean() and p_value < SIGNIFICANCE), a.mean(), b.mean(), p_value)


def at_most(name: str, lhs: float, rhs: float) -> Finding:
    return Finding(name, bool(lhs <= rhs), float(lhs), float(rhs))


def less_than(name: str, lhs: float, rhs: float) -> Finding:
    return Finding(name, bool(lhs < rhs), float(lhs), float(rhs))


def findings_frame(findings: Sequence[Finding]) -> pd.DataFrame:
    return pd.DataFrame([f._asdict() for f in findings], columns=list(Finding._fields))


class ReportJinja2Environment(Environment):
    """Plain-text Jinja2 environment with number formatting filters."""

    def __init__(self):
        super().__init__(autoescape=False, undefined=StrictUndefined, trim_blocks=True)
        self.filters["num"] = lambda value, digits=4: f"{value:.{digits}f}"
        self.filters["pct"] = lambda value: f"{100.0 * value:.1f}%"


BENCHMARK_TEMPLATE = """\
# Guidance benchmark

Config hash `{{ config_hash }}`, seed {{ seed }}, {{ n_samples }} molecules per method.

| method | weights | MAE | stability | validity | valid & unique | bond H | element H | passes | seconds |
|---|---|---|---|---|---|---|---|---|---|
{% for name, report in reports.items() %}
| {{ name }} | {{ weights[name] }} | {{ report.property_mae | num }} | {{ report.molecule_stability_ratio | pct }} | {{ report.validity_ratio | pct }} | {{ report.valid_and_unique_ratio | pct }} | {{ report.bond_entropy | num(3) }} | {{ report.element_entropy | num(3) }} | {{ report.forward_passes }} | {{ report.sampling_seconds | num(1) }} |
{% endfor %}

## Radar scores

| method |{% for axis in axes %} {{ axis }} |{% endfor %}

|---|{% for axis in axes %}---|{% endfor %}

{% for name, report in reports.items() %}
| {{ name }} |{% for axis in axes %} {{ report.scaled.get(axis, 0.0) | num(3) }} |{% endfor %}

{% endfor %}

## Findings

{% for finding in findings %}
- {{ "holds" if finding.holds else "does not hold" }}: {{ finding.name }} ({{ finding.lhs | num }} vs {{ finding.rhs | num }}{% if finding.p_value is not none %}, p={{ "%.2e" % finding.p_value }}{% endif %})
{% endfor %}
"""


def render_benchmark(
    reports: dict[str, MetricReport],
    weights: dict[str, Sequence[float]],
    findings: Sequence[Finding],
    config_hash: str,
    seed: int,
) -> str:
    """Markdown summary of a benchmark run."""
    env = ReportJinja2Environment()
    axes = sorted({axis for report in reports.values() for axis in report.scaled})
    n_samples = max((r.n_samples for r in reports.values()), default=0)
    return env.from_string(BENCHMARK_TEMPLATE).render(
        reports=reports,
        weights={k: ", ".join(f"{w:.3g}" for w in v) for k, v in weights.items()},
        findings=findings,
        axes=axes,
        config_hash=config_hash,
        seed=seed,
        n_samples=n_samples,
    )
