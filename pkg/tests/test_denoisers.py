#!/usr/bin/env python3
"""Tests for the empirical posterior, Gaussian velocity, classifier and guides."""

import numpy as np
import pytest
from conftest import make_molecule

from flowguide.denoisers import (
    DEFAULT_GUIDES,
    NO_BIN,
    EmpiricalPosterior,
    GaussianVelocityModel,
    GuideModelSpec,
    MatchCounts,
    NoisyStateClassifier,
    build_guide,
    fit_velocity_model,
    gaussian_posterior_means,
    gaussian_velocity,
    guide_from_state,
    guide_state,
    held_out_nll,
    posterior,
    predictor_ratios,
)
from flowguide.errors import EmptyDataset, UnresolvedKey
from flowguide.flowcore import MODALITIES, slot_layout
from flowguide.sampler import ModelBundle
from flowguide.toymol import MAX_ATOMS, Dataset


def _largest_stratum(dataset: Dataset) -> int:
    return max(dataset.atom_counts(), key=lambda n: len(dataset.stratum(n).indices))


class TestEmpiricalPosterior:
    def test_all_masked_is_stratum_marginal(self, small_dataset: Dataset, bundle: ModelBundle):
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        probs = bundle.posterior.probabilities(n, layout.all_masked(1))
        first_types = small_dataset.stratum(n).tokens[:, 0]
        expected = np.bincount(first_types, minlength=4) / len(first_types)
        np.testing.assert_allclose(probs[0, :4], expected)

    def test_rows_are_normalized_per_slot(self, small_dataset: Dataset, bundle: ModelBundle):
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        states = layout.all_masked(3)
        states[1, 0] = small_dataset.stratum(n).tokens[0, 0]
        probs = bundle.posterior.probabilities(n, states, [0, 1, NO_BIN])
        for m in MODALITIES:
            np.testing.assert_allclose(layout.per_slot(probs, m).sum(axis=-1), 1.0)

    def test_fully_revealed_molecule_is_a_point_mass(
        self, small_dataset: Dataset, bundle: ModelBundle
    ):
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        tokens = small_dataset.stratum(n).tokens[:1]
        probs = bundle.posterior.probabilities(n, tokens)
        np.testing.assert_array_equal(probs, layout.onehot(tokens))

    def test_enumerated_posterior(self):
        # {XY, XY, XX} with atom 0 revealed as X: atom 1 is Y in two of three matches
        dataset = Dataset.from_molecules(
            [
                make_molecule("XY", [0, 0], [1]),
                make_molecule("XY", [0, 0], [1]),
                make_molecule("XX", [0, 0], [1]),
            ],
            bin_edges=np.array([0.0, 10.0]),
        )
        layout = slot_layout(2)
        state = layout.all_masked(1)
        state[0, 0] = 0
        probs = EmpiricalPosterior(dataset).probabilities(2, state)[0]
        start = layout.offsets[1]
        np.testing.assert_allclose(probs[start : start + 4], [1 / 3, 2 / 3, 0.0, 0.0])

    def test_empty_conditional_match_falls_back(self, bundle: ModelBundle):
        n = 2
        layout = slot_layout(n)
        counts = np.zeros((1, layout.n_categories))
        counts[0, layout.offsets] = 5.0
        match = MatchCounts(
            counts=counts,
            totals=np.array([5.0]),
            cond_counts=np.zeros_like(counts),
            cond_totals=np.array([0.0]),
        )
        cond = bundle.posterior.from_counts(n, match, conditional=True)
        uncond = bundle.posterior.from_counts(n, match, conditional=False)
        np.testing.assert_array_equal(cond, uncond)

    def test_empty_stratum_is_uniform(self, bundle: ModelBundle, small_dataset: Dataset):
        missing = [n for n in range(2, MAX_ATOMS + 1) if n not in small_dataset.atom_counts()]
        if not missing:
            pytest.skip("Every atom count is present in the fixture dataset")
        layout = slot_layout(missing[0])
        probs = bundle.posterior.probabilities(missing[0], layout.all_masked(1))
        np.testing.assert_allclose(probs[0, :4], 0.25)

    def test_smoothing_keeps_unseen_categories(self, small_dataset: Dataset):
        smoothed = EmpiricalPosterior(small_dataset, smoothing=1.0)
        n = _largest_stratum(small_dataset)
        probs = smoothed.probabilities(n, slot_layout(n).all_masked(1))
        assert (probs > 0).all()

    def test_negative_smoothing(self, small_dataset: Dataset):
        with pytest.raises(ValueError):
            EmpiricalPosterior(small_dataset, smoothing=-1.0)

    def test_single_slot_posterior(self, small_dataset: Dataset, bundle: ModelBundle):
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        revealed = {m: seq.tokens[0] for m, seq in layout.split(layout.all_masked(1)).items()}
        p = posterior(bundle.posterior, revealed, n, ("charges", 0))
        assert p.shape == (3,)
        assert p.sum() == pytest.approx(1.0)

    def test_single_slot_posterior_rejects_revealed_slot(
        self, small_dataset: Dataset, bundle: ModelBundle
    ):
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        parts = layout.split(small_dataset.stratum(n).tokens[:1])
        revealed = {m: seq.tokens[0] for m, seq in parts.items()}
        with pytest.raises(ValueError, match="not masked"):
            posterior(bundle.posterior, revealed, n, ("atom_types", 0))


class TestGaussianVelocity:
    def test_standard_normal_closed_form(self):
        # x0, x1 ~ N(0, 1): E[x1 - x0 | x] = (2t - 1) x / ((1 - t)^2 + t^2)
        x, t = np.array([0.7, -1.2, 0.1]), 0.3
        expected = (2 * t - 1) * x / ((1 - t) ** 2 + t**2)
        np.testing.assert_allclose(gaussian_velocity(x, t, np.zeros(3), np.ones(3)), expected)

    def test_point_mass_target(self):
        # With zero variance the flow moves straight to the mean
        x, t, mean = np.array([0.2, 0.4]), 0.5, np.array([1.0, -1.0])
        np.testing.assert_allclose(
            gaussian_velocity(x, t, mean, np.zeros(2)), (mean - x) / (1 - t)
        )

    @pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
    def test_matches_monte_carlo_regression(self, t: float):
        # x_t is jointly Gaussian with x0 and x1, so the conditional means are linear
        # in x_t and least squares on samples recovers them within ~0.03 at 400k draws.
        rng = np.random.default_rng(11)
        mean, variance = np.array([0.8, -0.5]), np.array([0.3, 2.0])
        size = 400_000
        x0 = rng.normal(size=(size, 2))
        x1 = mean + np.sqrt(variance) * rng.normal(size=(size, 2))
        x_t = (1 - t) * x0 + t * x1
        points = np.array([[-1.0, 0.5], [0.0, 0.0], [1.5, -2.0]])
        e1, e0 = gaussian_posterior_means(points, t, mean, variance)
        u = gaussian_velocity(points, t, mean, variance)
        for d in range(2):
            fits = {
                "x1": np.polyfit(x_t[:, d], x1[:, d], 1),
                "x0": np.polyfit(x_t[:, d], x0[:, d], 1),
                "u": np.polyfit(x_t[:, d], x1[:, d] - x0[:, d], 1),
            }
            np.testing.assert_allclose(np.polyval(fits["x1"], points[:, d]), e1[:, d], atol=0.03)
            np.testing.assert_allclose(np.polyval(fits["x0"], points[:, d]), e0[:, d], atol=0.03)
            np.testing.assert_allclose(np.polyval(fits["u"], points[:, d]), u[:, d], atol=0.03)

    def test_undefined_at_one(self):
        with pytest.raises(ValueError):
            gaussian_velocity(np.zeros(3), 1.0, np.zeros(3), np.ones(3))

    def test_fit_has_pooled_entries(self, small_dataset: Dataset, bundle: ModelBundle):
        for n in small_dataset.atom_counts():
            key = bundle.velocity.resolve(n, None)
            assert key == (n, None)
            np.testing.assert_allclose(
                bundle.velocity.means[key], small_dataset.stratum(n).positions.mean(axis=0)
            )

    def test_sparse_bins_resolve_to_pooled(self, small_dataset: Dataset):
        model = fit_velocity_model(small_dataset, min_bin_count=10**6)
        n = small_dataset.atom_counts()[0]
        assert model.resolve(n, 0) == (n, None)

    def test_unknown_atom_count(self, bundle: ModelBundle):
        with pytest.raises(UnresolvedKey) as info:
            bundle.velocity.resolve(42, None)
        assert isinstance(info.value, KeyError)

    def test_empty_dataset(self, small_dataset: Dataset):
        with pytest.raises(EmptyDataset):
            fit_velocity_model(small_dataset.subset([]))

    def test_state_roundtrip(self, small_dataset: Dataset, bundle: ModelBundle):
        restored = GaussianVelocityModel.from_state(bundle.velocity.to_state())
        n = _largest_stratum(small_dataset)
        x = np.random.default_rng(0).normal(size=(4, 3 * n))
        np.testing.assert_array_equal(
            restored.velocity_batch(x, 0.4, n, [0, 1, 2, NO_BIN]),
            bundle.velocity.velocity_batch(x, 0.4, n, [0, 1, 2, NO_BIN]),
        )


class TestClassifier:
    def test_all_masked_gives_bin_frequencies(self, small_dataset: Dataset):
        classifier = NoisyStateClassifier(small_dataset)
        n = _largest_stratum(small_dataset)
        probs = classifier.classify(slot_layout(n).all_masked(1), n)
        bins = small_dataset.stratum(n).bins
        expected = np.bincount(bins, minlength=small_dataset.n_bins) / len(bins)
        np.testing.assert_allclose(probs[0], expected)

    def test_predictor_ratios_average_to_one(self, small_dataset: Dataset, bundle: ModelBundle):
        # sum_a p(a | x_t) * p(y | a, x_t) / p(y | x_t) = 1 on every slot
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        bin_index = int(small_dataset.stratum(n).bins[0])
        states = layout.all_masked(1)
        match = bundle.posterior.index.counts(n, states, bin_index)
        ratios = predictor_ratios(match)
        p = bundle.posterior.from_counts(n, match, conditional=False)
        for m in MODALITIES:
            weighted = (layout.per_slot(p, m) * layout.per_slot(ratios, m)).sum(axis=-1)
            np.testing.assert_allclose(weighted, 1.0)

    def test_ratios_are_classifier_ratios(self, small_dataset: Dataset, bundle: ModelBundle):
        classifier = NoisyStateClassifier(small_dataset, index=bundle.posterior.index)
        n = _largest_stratum(small_dataset)
        layout = slot_layout(n)
        bin_index = int(small_dataset.stratum(n).bins[0])
        masked = layout.all_masked(1)
        ratios = classifier.ratios(n, masked, bin_index)[0]
        before = classifier.classify(masked, n)[0, bin_index]
        for a in np.unique(small_dataset.stratum(n).tokens[:, 0]):
            revealed = masked.copy()
            revealed[0, 0] = a
            after = classifier.classify(revealed, n)[0, bin_index]
            assert ratios[layout.offsets[0] + a] == pytest.approx(after / before)


class TestGuides:
    def test_default_guides_are_degraded(self):
        names = {g.name for g in DEFAULT_GUIDES}
        assert names == {"undertrained", "low_capacity"}
        assert all(
            g.subsample_fraction < 1.0 or g.smoothing > 0 or g.marginalize_positions
            for g in DEFAULT_GUIDES
        )

    def test_identity_guide_matches_main_model(
        self, small_dataset: Dataset, bundle: ModelBundle
    ):
        guide = build_guide(small_dataset, GuideModelSpec(name="same"))
        n = _largest_stratum(small_dataset)
        states = slot_layout(n).all_masked(2)
        np.testing.assert_array_equal(
            guide.posterior.probabilities(n, states, [0, 1]),
            bundle.posterior.probabilities(n, states, [0, 1]),
        )
        x = np.random.default_rng(1).normal(size=(2, 3 * n))
        np.testing.assert_array_equal(
            guide.velocity.velocity_batch(x, 0.5, n, [0, 1]),
            bundle.velocity.velocity_batch(x, 0.5, n, [0, 1]),
        )

    def test_state_roundtrip(self, small_dataset: Dataset):
        guide = build_guide(small_dataset, DEFAULT_GUIDES[0])
        restored = guide_from_state(guide_state(guide), small_dataset)
        assert restored.spec == guide.spec
        assert len(restored.posterior.dataset) == len(guide.posterior.dataset)

    def test_tiny_subsample_resolves_every_atom_count(self, small_dataset: Dataset):
        guide = build_guide(small_dataset, GuideModelSpec(name="tiny", subsample_fraction=0.002))
        assert len(guide.posterior.dataset) == 1
        drawn = guide.posterior.dataset.molecules[0].n_atoms
        for n in small_dataset.atom_counts():
            assert guide.velocity.resolve(n, 0) == (n, None)
            if n != drawn:
                np.testing.assert_allclose(
                    guide.velocity.means[(n, None)], small_dataset.stratum(n).positions.mean(axis=0)
                )
        restored = guide_from_state(guide_state(guide), small_dataset)
        assert set(restored.velocity.means) == set(guide.velocity.means)

    def test_held_out_nll(self, small_dataset: Dataset, bundle: ModelBundle):
        smoothed = build_guide(small_dataset, DEFAULT_GUIDES[1])
        heldout = small_dataset.molecules
        main_nll = held_out_nll(bundle.posterior, heldout)
        guide_nll = held_out_nll(smoothed.posterior, heldout)
        assert np.isfinite(main_nll) and main_nll > 0
        # Frequencies maximize the likelihood of the molecules they were counted on
        assert guide_nll > main_nll
