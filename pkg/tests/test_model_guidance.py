#!/usr/bin/env python3
"""Tests for model-guidance targets, gradients, lazy EMA and training."""

from unittest.mock import patch

import numpy as np
import pytest

from flowguide.denoisers import (
    MGExample,
    MGModel,
    guidance_scale,
    mg_target,
    train_mg,
    uniform_weight_sampler,
    weight_bucket,
)
from flowguide.denoisers.model_guidance import BASE, GUIDE, default_warmup
from flowguide.errors import TrainingDivergence, UnresolvedKey
from flowguide.flowcore import TimeGrid, slot_layout
from flowguide.sampler import GuidanceSpec, ModelBundle, SampleRequest, sample
from flowguide.toymol import Dataset

SMALL = SampleRequest(count=12, grid=TimeGrid(steps=10), seed=3)


def _fixed_weight(w: float):
    return lambda rng: w


@pytest.fixture
def mg_model(small_dataset: Dataset, bundle: ModelBundle) -> MGModel:
    return MGModel(small_dataset, bundle.velocity, bundle.posterior, ema_decay=0.5)


@pytest.fixture(scope="module")
def guided_bundle(small_dataset: Dataset, bundle: ModelBundle) -> ModelBundle:
    """MG model trained with a large guided share and no warmup."""
    mg = train_mg(
        small_dataset,
        epochs=5,
        warmup=0,
        ema_decay=0.9,
        p_uncond=0.1,
        p_guided=0.5,
        seed=0,
        velocity_model=bundle.velocity,
        posterior=bundle.posterior,
    )
    return bundle._replace(mg=mg, guides={})


def _guided_example(model: MGModel, seed: int, w: float = 1.5) -> MGExample:
    rng = np.random.default_rng(seed)
    while True:
        example = model.draw_example(rng, _fixed_weight(w), p_uncond=0.0, p_guided=1.0)
        # Keep examples with masked slots so the cross-entropy term is exercised
        if (example.noisy == slot_layout(example.n_atoms).mask_tokens).any():
            return example


def _term_indices(model: MGModel, example: MGExample) -> np.ndarray:
    spans = [model.block(block_id) for block_id, _ in model.terms(example.key)]
    return np.concatenate([np.arange(start, end) for start, _, end in spans])


def _populated_cells(dataset: Dataset, min_count: int) -> list[tuple[int, int]]:
    cells = []
    for n in dataset.atom_counts():
        bins, counts = np.unique(dataset.stratum(n).bins, return_counts=True)
        cells.extend((n, int(b)) for b, c in zip(bins, counts, strict=True) if c >= min_count)
    return cells


class TestWeightBucket:
    @pytest.mark.parametrize(
        ("w", "bucket"),
        [(0.0, 0), (0.49, 0), (0.5, 1), (1.0, 1), (1.0001, 2), (1.125, 3), (1.99, 9), (2.0, 9), (5.0, 9)],
    )
    def test_buckets(self, w: float, bucket: int):
        assert weight_bucket(w) == bucket

    @pytest.mark.parametrize(
        ("bucket", "scale"), [(0, 0.0), (1, 0.0), (2, 1.0625), (6, 1.5625), (9, 1.9375)]
    )
    def test_guidance_scale_is_bucket_centre(self, bucket: int, scale: float):
        assert guidance_scale(bucket) == pytest.approx(scale)

    def test_resolve(self, mg_model: MGModel, small_dataset: Dataset):
        n = small_dataset.atom_counts()[0]
        assert mg_model.resolve(n, None, 1.7) == (n, None, 0)
        assert mg_model.resolve(n, 2, 1.0) == (n, 2, 1)
        assert mg_model.resolve(n, 2, 0.0) == (n, 2, 1)
        assert mg_model.resolve(n, 2, 1.5) == (n, 2, 6)

    def test_unknown_key(self, mg_model: MGModel):
        with pytest.raises(UnresolvedKey):
            mg_model.terms((42, None, 0))

    def test_buckets_share_the_guide_block(self, mg_model: MGModel, small_dataset: Dataset):
        n = small_dataset.atom_counts()[0]
        rng = np.random.default_rng(0)
        params = rng.normal(size=mg_model.n_parameters)
        base_start, _, base_end = mg_model.block((n, 1, BASE))
        guide_start, _, guide_end = mg_model.block((n, 1, GUIDE))
        for bucket in range(2, 10):
            np.testing.assert_allclose(
                mg_model.effective(params, (n, 1, bucket)),
                params[base_start:base_end] + guidance_scale(bucket) * params[guide_start:guide_end],
            )
        np.testing.assert_array_equal(
            mg_model.effective(params, (n, 1, 1)), params[base_start:base_end]
        )

    def test_initial_parameters(self, mg_model: MGModel, bundle: ModelBundle, small_dataset: Dataset):
        n = small_dataset.atom_counts()[0]
        start, mid, end = mg_model.block((n, None, BASE))
        np.testing.assert_array_equal(mg_model.online[start:mid], bundle.velocity.means[(n, None)])
        assert not mg_model.online[mid:end].any()
        start, _, end = mg_model.block((n, 0, GUIDE))
        assert not mg_model.online[start:end].any()


class TestTargets:
    def test_mg_target(self):
        np.testing.assert_allclose(
            mg_target(np.ones(3), 0.5, np.full(3, 3.0), np.full(3, 1.0)), np.full(3, 2.0)
        )

    def test_scalar_target(self):
        target = mg_target(np.array([1.0]), 1.5, np.array([0.7]), np.array([0.5]))
        assert target[0] == pytest.approx(1.3)

    def test_without_correction_target_is_data(self, mg_model: MGModel):
        example = _guided_example(mg_model, 0)
        u, q = mg_model.training_target(example, mg_model.ema, correction=False)
        np.testing.assert_array_equal(u, example.x1 - example.x0)
        np.testing.assert_array_equal(q, slot_layout(example.n_atoms).onehot(example.clean)[0])

    def test_unit_weight_loss_ignores_correction(self, mg_model: MGModel):
        example = _guided_example(mg_model, 9, w=1.0)
        assert example.key[2] == 1
        with_correction = mg_model.loss_and_grad(example, correction=True)
        without = mg_model.loss_and_grad(example, correction=False)
        assert with_correction[0] == without[0]
        np.testing.assert_array_equal(with_correction[1], without[1])

    def test_correction_depends_on_ema_only(self, mg_model: MGModel):
        example = _guided_example(mg_model, 1)
        start, mid, _ = mg_model.block((example.n_atoms, example.bin, BASE))
        ema = mg_model.ema.copy()
        shifted = ema.copy()
        shifted[start:mid] += 0.3
        u_a, _ = mg_model.training_target(example, ema, correction=True)
        u_b, _ = mg_model.training_target(example, shifted, correction=True)
        assert not np.allclose(u_a, u_b)

        online = mg_model.online + 1.0
        loss_a, _ = mg_model.loss_and_grad(example, online=mg_model.online, ema=ema)
        loss_b, _ = mg_model.loss_and_grad(example, online=online, ema=ema)
        target_a, _ = mg_model.training_target(example, ema, correction=True)
        assert loss_a != loss_b
        np.testing.assert_array_equal(target_a, u_a)

    def test_discrete_target_is_normalized(self, mg_model: MGModel):
        example = _guided_example(mg_model, 2)
        layout = slot_layout(example.n_atoms)
        _, q = mg_model.training_target(example, mg_model.ema, correction=True)
        for m in ("atom_types", "charges", "bonds"):
            np.testing.assert_allclose(layout.per_slot(q[None, :], m).sum(axis=-1), 1.0)


class TestGradient:
    @pytest.mark.parametrize("correction", [False, True])
    def test_matches_finite_differences(self, mg_model: MGModel, correction: bool):
        example = _guided_example(mg_model, 3)
        rng = np.random.default_rng(4)
        online = mg_model.online + 0.1 * rng.normal(size=mg_model.n_parameters)
        ema = mg_model.ema.copy()
        _, grad = mg_model.loss_and_grad(example, online=online, ema=ema, correction=correction)

        h = 1e-5
        for i in _term_indices(mg_model, example):
            if abs(grad[i]) < 1e-3:
                continue
            up, down = online.copy(), online.copy()
            up[i] += h
            down[i] -= h
            loss_up, _ = mg_model.loss_and_grad(example, online=up, ema=ema, correction=correction)
            loss_down, _ = mg_model.loss_and_grad(
                example, online=down, ema=ema, correction=correction
            )
            assert (loss_up - loss_down) / (2 * h) == pytest.approx(grad[i], rel=1e-4, abs=1e-6)

    def test_gradient_is_confined_to_the_example_blocks(self, mg_model: MGModel):
        example = _guided_example(mg_model, 5)
        _, grad = mg_model.loss_and_grad(example)
        outside = np.ones(mg_model.n_parameters, dtype=bool)
        outside[_term_indices(mg_model, example)] = False
        assert not grad[outside].any()

    def test_guide_gradient_is_scaled_base_gradient(self, mg_model: MGModel):
        example = _guided_example(mg_model, 6)
        _, grad = mg_model.loss_and_grad(example)
        base_start, _, base_end = mg_model.block((example.n_atoms, example.bin, BASE))
        guide_start, _, guide_end = mg_model.block((example.n_atoms, example.bin, GUIDE))
        np.testing.assert_allclose(
            grad[guide_start:guide_end],
            guidance_scale(example.key[2]) * grad[base_start:base_end],
        )


class TestLazyEma:
    def test_matches_eager_updates(self, mg_model: MGModel):
        example = _guided_example(mg_model, 6)
        spans = [mg_model.block(block_id) for block_id, _ in mg_model.terms(example.key)]
        e0 = [mg_model.ema[s:e].copy() for s, _, e in spans]

        mg_model.sgd_step(example, lr=0.01, step=1, correction=False)
        o1 = [mg_model.online[s:e].copy() for s, _, e in spans]
        e1 = [mg_model.ema[s:e].copy() for s, _, e in spans]
        for before, online, after in zip(e0, o1, e1, strict=True):
            np.testing.assert_allclose(after, before + 0.5 * (online - before))

        # Steps 2-4 touch other blocks only; these blocks decay towards o1 meanwhile
        mg_model.sgd_step(example, lr=0.01, step=5, correction=False)
        for (s, _, e), online, after in zip(spans, o1, e1, strict=True):
            o5 = mg_model.online[s:e]
            e4 = online + 0.5**3 * (after - online)
            np.testing.assert_allclose(mg_model.ema[s:e], e4 + 0.5 * (o5 - e4))

    def test_sync_reaches_latest_step(self, mg_model: MGModel):
        example = _guided_example(mg_model, 7)
        start, _, end = mg_model.block((example.n_atoms, example.bin, BASE))
        mg_model.sgd_step(example, lr=0.01, step=1, correction=False)
        seed = 8
        other = _guided_example(mg_model, seed, w=1.0)
        while (other.n_atoms, other.bin) == (example.n_atoms, example.bin):
            seed += 1
            other = _guided_example(mg_model, seed, w=1.0)
        mg_model.sgd_step(other, lr=0.01, step=10, correction=False)
        online = mg_model.online[start:end].copy()
        before = mg_model.ema[start:end].copy()
        mg_model.sync_ema()
        np.testing.assert_allclose(mg_model.ema[start:end], online + 0.5**9 * (before - online))


class TestTraining:
    def test_trained_model_is_finite(self, mg_bundle: ModelBundle):
        assert np.isfinite(mg_bundle.mg.online).all()
        assert np.isfinite(mg_bundle.mg.ema).all()

    def test_training_is_deterministic(self, small_dataset: Dataset, mg_bundle: ModelBundle):
        again = train_mg(
            small_dataset,
            epochs=1,
            warmup=50,
            ema_decay=0.99,
            seed=0,
            velocity_model=mg_bundle.velocity,
            posterior=mg_bundle.posterior,
        )
        np.testing.assert_array_equal(again.ema, mg_bundle.mg.ema)

    @pytest.mark.parametrize(("steps", "warmup"), [(300, 30), (15_000, 1000), (100_000, 1000)])
    def test_default_warmup_scales_with_budget(self, steps: int, warmup: int):
        assert default_warmup(steps) == warmup

    def test_zero_learning_rate_keeps_initial_ema(self, small_dataset: Dataset, bundle: ModelBundle):
        trained = train_mg(
            small_dataset,
            epochs=1,
            lr=0.0,
            warmup=0,
            seed=0,
            velocity_model=bundle.velocity,
            posterior=bundle.posterior,
        )
        initial = MGModel(small_dataset, bundle.velocity, bundle.posterior)
        np.testing.assert_array_equal(trained.ema, initial.online)
        np.testing.assert_array_equal(trained.online, initial.online)

    def test_unit_weights_never_train_the_guide_blocks(
        self, small_dataset: Dataset, bundle: ModelBundle
    ):
        trained = train_mg(
            small_dataset,
            epochs=1,
            w_sampler=_fixed_weight(1.0),
            warmup=float("inf"),
            seed=0,
            velocity_model=bundle.velocity,
            posterior=bundle.posterior,
        )
        for block_id in trained.keys:
            if block_id[2] == GUIDE:
                start, _, end = trained.block(block_id)
                assert not trained.ema[start:end].any()

    def test_unit_weight_untrained_model_matches_conditional_sampling(
        self, small_dataset: Dataset, bundle: ModelBundle
    ):
        mg = train_mg(
            small_dataset,
            epochs=1,
            lr=0.0,
            w_sampler=_fixed_weight(1.0),
            warmup=float("inf"),
            seed=0,
            velocity_model=bundle.velocity,
            posterior=bundle.posterior,
        )
        with_mg = sample(GuidanceSpec(method="mg", mg_weight=1.0), bundle._replace(mg=mg), SMALL)
        vanilla = sample(GuidanceSpec(), bundle, SMALL)
        for (a, c_a), (b, c_b) in zip(with_mg, vanilla, strict=True):
            assert c_a == c_b
            np.testing.assert_array_equal(a.to_codes(), b.to_codes())
            np.testing.assert_allclose(a.positions, b.positions, atol=1e-12)

    def test_every_populated_cell_trains_its_guide_block(
        self, guided_bundle: ModelBundle, small_dataset: Dataset
    ):
        mg = guided_bundle.mg
        cells = _populated_cells(small_dataset, min_count=10)
        assert cells
        for n, b in cells:
            start, _, end = mg.block((n, b, GUIDE))
            assert np.abs(mg.ema[start:end]).max() > 0.0, (n, b)

    def test_guidance_shifts_posteriors_towards_the_condition(
        self, guided_bundle: ModelBundle, small_dataset: Dataset
    ):
        # Raising the embedded weight must move the all-masked posterior the way
        # classifier-free guidance would: along p(. | c) - p(. | none).
        mg, posterior = guided_bundle.mg, guided_bundle.posterior
        alignment = 0.0
        for n, b in _populated_cells(small_dataset, min_count=10):
            state = slot_layout(n).mask_tokens[None, :]
            p_cond = posterior.probabilities(n, state, b)
            p_uncond = posterior.probabilities(n, state, None)
            _, _, tilt_1 = mg.parameters(n, b, 1.0, 1)
            _, _, tilt_2 = mg.parameters(n, b, 1.9, 1)
            q_1 = mg.probabilities_batch(n, state, b, tilt_1)
            q_2 = mg.probabilities_batch(n, state, b, tilt_2)
            alignment += float(((q_2 - q_1) * (p_cond - p_uncond)).sum())
        assert alignment > 0.0

    def test_guided_samples_differ_from_unit_weight(self, guided_bundle: ModelBundle):
        guided = sample(GuidanceSpec(method="mg", mg_weight=1.5), guided_bundle, SMALL)
        unit = sample(GuidanceSpec(method="mg", mg_weight=1.0), guided_bundle, SMALL)
        assert any(
            not np.array_equal(a.to_codes(), b.to_codes())
            for (a, _), (b, _) in zip(guided, unit, strict=True)
        )

    def test_non_finite_loss(self, small_dataset: Dataset):
        with (
            patch.object(MGModel, "sgd_step", return_value=float("nan")),
            pytest.raises(TrainingDivergence, match="Non-finite"),
        ):
            train_mg(small_dataset, epochs=1)

    def test_divergence_against_first_window(self, small_dataset: Dataset):
        def fake_step(example, lr, step, correction):
            return 1.0 if step <= 10 else 100.0

        with (
            patch("flowguide.denoisers.model_guidance.LOSS_WINDOW", 10),
            patch.object(MGModel, "sgd_step", side_effect=fake_step),
            pytest.raises(TrainingDivergence, match="exceeded"),
        ):
            train_mg(small_dataset, epochs=1)

    def test_weight_sampler_range(self):
        sampler = uniform_weight_sampler(1.0, 2.0)
        rng = np.random.default_rng(0)
        draws = [sampler(rng) for _ in range(200)]
        assert min(draws) >= 1.0 and max(draws) <= 2.0

    def test_state_roundtrip(self, small_dataset: Dataset, mg_bundle: ModelBundle):
        state = mg_bundle.mg.to_state()
        restored = MGModel.from_state(
            state, small_dataset, mg_bundle.velocity, mg_bundle.posterior
        )
        np.testing.assert_array_equal(restored.ema, mg_bundle.mg.ema)
        assert restored.keys == mg_bundle.mg.keys

    def test_state_rejects_other_dataset(self, small_dataset: Dataset, mg_bundle: ModelBundle):
        state = mg_bundle.mg.to_state()
        state["keys"] = state["keys"][:-1]
        with pytest.raises(ValueError, match="key layout"):
            MGModel.from_state(state, small_dataset, mg_bundle.velocity, mg_bundle.posterior)


@pytest.mark.slow
def test_default_training_moves_guided_samples(small_dataset: Dataset, bundle: ModelBundle):
    """Default hyperparameters leave no populated guide block untouched."""
    mg = train_mg(small_dataset, velocity_model=bundle.velocity, posterior=bundle.posterior)
    for n, b in _populated_cells(small_dataset, min_count=25):
        start, _, end = mg.block((n, b, GUIDE))
        assert np.abs(mg.ema[start:end]).max() > 0.0, (n, b)
    guided = sample(GuidanceSpec(method="mg", mg_weight=1.5), bundle._replace(mg=mg), SMALL)
    vanilla = sample(GuidanceSpec(), bundle, SMALL)
    assert any(
        not np.array_equal(a.to_codes(), b.to_codes())
        for (a, _), (b, _) in zip(guided, vanilla, strict=True)
    )
