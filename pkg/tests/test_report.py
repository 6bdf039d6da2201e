#!/usr/bin/env python3
"""Tests for findings and the Markdown benchmark summary."""

import pytest
from conftest import make_molecule

from flowguide.metrics import metric_report
from flowguide.report import (
    Finding,
    at_most,
    findings_frame,
    less_than,
    paired_improvement,
    render_benchmark,
)


@pytest.fixture
def pairs():
    xx = make_molecule("XX", [0, 0], [1])
    return [(xx, 0.2 + 0.1 * i) for i in range(20)]


class TestFindings:
    def test_identical_samples_do_not_improve(self, pairs):
        finding = paired_improvement("cfg beats vanilla", pairs, pairs)
        assert finding.p_value == 1.0
        assert not finding.holds

    def test_strict_improvement(self, pairs):
        # Every target of ``better`` sits on the oracle value 0.2
        better = [(mol, 0.2) for mol, _ in pairs[1:]]
        finding = paired_improvement("exact", better, pairs[1:])
        assert finding.lhs == pytest.approx(0.0)
        assert finding.p_value < 0.01
        assert finding.holds

    def test_length_mismatch(self, pairs):
        with pytest.raises(ValueError, match="differ in length"):
            paired_improvement("bad", pairs, pairs[:-1])

    def test_comparisons(self):
        assert at_most("eq", 1.0, 1.0).holds
        assert not less_than("eq", 1.0, 1.0).holds
        assert less_than("lt", 0.5, 1.0).p_value is None

    def test_frame(self):
        frame = findings_frame([Finding("a", True, 1.0, 2.0, 0.001), at_most("b", 3.0, 1.0)])
        assert list(frame.columns) == ["name", "holds", "lhs", "rhs", "p_value"]
        assert frame["holds"].tolist() == [True, False]


def test_render_benchmark(pairs):
    reports = {
        "vanilla": metric_report(pairs, forward_passes=1, mae_max=2.0),
        "cfg": metric_report(pairs, forward_passes=2, mae_max=2.0),
    }
    text = render_benchmark(
        reports,
        weights={"vanilla": (1.0, 1.0), "cfg": (2.25, 1.5)},
        findings=[Finding("cfg beats vanilla", True, 0.5, 0.9, 1e-4)],
        config_hash="abc123",
        seed=7,
    )
    assert text.startswith("# Guidance benchmark")
    assert "`abc123`" in text and "seed 7" in text
    assert "| cfg | 2.25, 1.5 |" in text
    assert "property_alignment" in text
    assert "- holds: cfg beats vanilla" in text
    assert "p=1.00e-04" in text
