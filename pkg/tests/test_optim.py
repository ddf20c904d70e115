"""Schedule math, SGD semantics, freeze invariance, and training loop tests."""

import numpy as np
import pytest

from ftlab.data import LabeledDataset
from ftlab.model import LayerSpec, StageSpec, build_staged_network
from ftlab.optim import (LrPolicy, MultiplierSchedule, SgdState, effective_lr,
                         evaluate, lr_at, sgd_step, train, uniform_schedule)

REFERENCE_POLICY = LrPolicy(base_lr=0.01, step_size=300_000,
                        total_iterations=900_000, gamma=0.1)


def dense_model(seed=0, in_dim=4, hidden=6, labels=3):
    spec = (StageSpec("hidden", (LayerSpec("dense", out_features=hidden),
                                 LayerSpec("relu"))),
            StageSpec("fc", (LayerSpec("dense"),)))
    return build_staged_network(spec, (in_dim,), labels, seed=seed)


def toy_dataset(n_per_label=8, labels=3, in_dim=4, seed=0, spread=2.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(labels, in_dim))
    feats, ys = [], []
    for l in range(labels):
        feats.append(centers[l] + 0.3 * rng.standard_normal((n_per_label, in_dim)))
        ys.extend([l] * n_per_label)
    return LabeledDataset(np.concatenate(feats), np.array(ys),
                          tuple(f"l{i}" for i in range(labels)), "toy")


def snapshot(model):
    return {name: arr.copy() for name, arr in model.named_parameters()}


class TestLrPolicy:
    def test_reference_step_decay_values(self):
        assert lr_at(REFERENCE_POLICY, 0) == 0.01
        assert lr_at(REFERENCE_POLICY, 299_999) == 0.01
        assert lr_at(REFERENCE_POLICY, 300_000) == pytest.approx(0.001, rel=1e-12)
        assert lr_at(REFERENCE_POLICY, 600_000) == pytest.approx(0.0001, rel=1e-12)

    def test_iteration_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="iteration"):
            lr_at(REFERENCE_POLICY, -1)
        with pytest.raises(ValueError, match="iteration"):
            lr_at(REFERENCE_POLICY, 900_000)

    def test_monotone_non_increasing(self):
        policy = LrPolicy(0.5, step_size=7, total_iterations=100, gamma=0.5)
        rates = [lr_at(policy, i) for i in range(100)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            LrPolicy(0.0, 1, 1)
        with pytest.raises(ValueError):
            LrPolicy(0.1, 0, 1)
        with pytest.raises(ValueError):
            LrPolicy(0.1, 1, 1, gamma=0.0)
        with pytest.raises(ValueError):
            LrPolicy(0.1, 1, 1, gamma=1.5)

    def test_scaled_policy_divides_iterations_and_step(self):
        target = REFERENCE_POLICY.scaled(10)
        assert target.step_size == 30_000
        assert target.total_iterations == 90_000
        assert target.base_lr == REFERENCE_POLICY.base_lr


class TestEffectiveLr:
    def test_worked_example_exact(self):
        policy = LrPolicy(0.001, step_size=10, total_iterations=100)
        assert effective_lr(policy, 0, 2.0, 0.5) == 0.001

    def test_frozen_stage_is_zero(self):
        policy = LrPolicy(0.001, 10, 100)
        assert effective_lr(policy, 0, 0.0, 10.0) == 0.0

    def test_multiplier_8_scale_10(self):
        policy = LrPolicy(0.001, 10, 100)
        assert effective_lr(policy, 0, 8.0, 10.0) == pytest.approx(0.08, rel=1e-12)

    def test_negative_multiplier_rejected(self):
        policy = LrPolicy(0.001, 10, 100)
        with pytest.raises(ValueError, match="multiplier"):
            effective_lr(policy, 0, -1.0, 1.0)
        with pytest.raises(ValueError, match="scale"):
            effective_lr(policy, 0, 1.0, 0.0)

    def test_scale_linearity(self):
        policy = LrPolicy(0.003, 7, 50, gamma=0.5)
        for it in (0, 7, 21, 49):
            for mult in (0.0, 0.5, 2.0):
                a = effective_lr(policy, it, mult, 2.0)
                b = effective_lr(policy, it, mult, 1.0)
                assert a == pytest.approx(2.0 * b, rel=1e-12)


class TestSgdStep:
    def test_plain_gradient_step(self):
        m = dense_model(seed=1)
        policy = LrPolicy(0.1, 10, 100, gamma=1.0)
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        state = SgdState.for_model(m, momentum=0.0)
        before = snapshot(m)
        grads = {name: np.ones_like(arr) for name, arr in m.named_parameters()}
        sgd_step(m, grads, state, schedule, policy, 0)
        for name, arr in m.named_parameters():
            assert np.allclose(arr, before[name] - 0.1, rtol=1e-12)

    def test_two_momentum_steps_match_hand_unroll(self):
        # v1 = -eta*g ; w1 = w - eta*g
        # v2 = mu*v1 - eta*g ; w2 = w - eta*g - (mu*eta*g + eta*g)
        m = dense_model(seed=2)
        policy = LrPolicy(0.05, 10, 100, gamma=1.0)
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        state = SgdState.for_model(m, momentum=0.9)
        before = snapshot(m)
        grads = {name: np.full_like(arr, 2.0)
                 for name, arr in m.named_parameters()}
        sgd_step(m, grads, state, schedule, policy, 0)
        sgd_step(m, grads, state, schedule, policy, 1)
        eta_g = 0.05 * 2.0
        expected_delta = -eta_g - (0.9 * eta_g + eta_g)
        for name, arr in m.named_parameters():
            assert np.allclose(arr, before[name] + expected_delta, rtol=1e-12)

    def test_frozen_stages_untouched(self):
        m = dense_model(seed=3)
        policy = LrPolicy(0.1, 10, 1000, gamma=1.0)
        schedule = MultiplierSchedule({"hidden": 0.0, "fc": 1.0})
        state = SgdState.for_model(m, momentum=0.9)
        before = snapshot(m)
        rng = np.random.default_rng(0)
        for it in range(50):
            grads = {name: rng.standard_normal(arr.shape)
                     for name, arr in m.named_parameters()}
            sgd_step(m, grads, state, schedule, policy, it)
        after = snapshot(m)
        assert np.array_equal(before["hidden/0/w"], after["hidden/0/w"])
        assert np.array_equal(before["hidden/0/b"], after["hidden/0/b"])
        assert not np.array_equal(before["fc/0/w"], after["fc/0/w"])
        # frozen velocities never allocated energy
        assert not state.velocities["hidden/0/w"].any()

    def test_all_multipliers_zero_keeps_model_bit_identical(self):
        m = dense_model(seed=4)
        policy = LrPolicy(0.1, 10, 10_000, gamma=1.0)
        schedule = uniform_schedule(m.stage_names, m.head_name, 0.0, 0.0)
        state = SgdState.for_model(m)
        before = snapshot(m)
        grads = {name: np.ones_like(arr) for name, arr in m.named_parameters()}
        for it in range(1000):
            sgd_step(m, grads, state, schedule, policy, it)
        for name, arr in m.named_parameters():
            assert arr.tobytes() == before[name].tobytes()

    def test_schedule_must_cover_stages_exactly(self):
        m = dense_model()
        policy = LrPolicy(0.1, 10, 100)
        state = SgdState.for_model(m)
        grads = {name: np.zeros_like(arr) for name, arr in m.named_parameters()}
        with pytest.raises(ValueError, match="missing"):
            sgd_step(m, grads, state, MultiplierSchedule({"fc": 1.0}), policy, 0)
        full = MultiplierSchedule({"hidden": 1.0, "fc": 1.0, "ghost": 1.0})
        with pytest.raises(ValueError, match="unknown"):
            sgd_step(m, grads, state, full, policy, 0)

    def test_gradient_shape_mismatch_rejected(self):
        m = dense_model()
        policy = LrPolicy(0.1, 10, 100)
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        state = SgdState.for_model(m)
        grads = {name: np.zeros(3) for name, arr in m.named_parameters()}
        with pytest.raises(ValueError, match="shape"):
            sgd_step(m, grads, state, schedule, policy, 0)


class TestTrain:
    def test_fixed_seed_reproduces_bit_identical_parameters(self):
        ds = toy_dataset(seed=1)
        val = toy_dataset(seed=2)
        results = []
        for _ in range(2):
            m = dense_model(seed=5)
            schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
            policy = LrPolicy(0.05, step_size=20, total_iterations=60)
            train(m, ds, val, schedule, policy, batch_size=6, seed=99)
            results.append(snapshot(m))
        for name in results[0]:
            assert results[0][name].tobytes() == results[1][name].tobytes()

    def test_all_frozen_training_is_a_no_op(self):
        ds = toy_dataset(seed=3)
        m = dense_model(seed=6)
        initial_acc = evaluate(m, ds)
        schedule = uniform_schedule(m.stage_names, m.head_name, 0.0, 0.0)
        policy = LrPolicy(0.05, step_size=10, total_iterations=30)
        result = train(m, ds, ds, schedule, policy, batch_size=4, seed=0)
        assert result.final_accuracy == initial_acc
        assert result.best_accuracy == initial_acc

    def test_trace_length_scales_with_one_tenth_policy(self):
        ds = toy_dataset(seed=4)
        source_policy = LrPolicy(0.05, step_size=100, total_iterations=300)
        target_policy = source_policy.scaled(10)
        m1 = dense_model(seed=7)
        schedule = uniform_schedule(m1.stage_names, m1.head_name, 1.0, 1.0)
        r1 = train(m1, ds, ds, schedule, source_policy, batch_size=6, seed=1)
        m2 = dense_model(seed=7)
        r2 = train(m2, ds, ds, schedule, target_policy, batch_size=6, seed=1)
        # same evaluation density: step_size/10 cadence in both runs
        assert len(r1.trace) == len(r2.trace)
        assert r1.trace[-1][0] == 300
        assert r2.trace[-1][0] == 30

    def test_training_improves_over_init_on_separable_data(self):
        ds = toy_dataset(seed=5, n_per_label=12)
        m = dense_model(seed=8)
        before = evaluate(m, ds)
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        policy = LrPolicy(0.1, step_size=100, total_iterations=200)
        result = train(m, ds, ds, schedule, policy, batch_size=6, seed=2)
        assert result.best_accuracy >= before
        assert result.best_accuracy > 0.8

    def test_best_model_snapshot_matches_best_accuracy(self):
        ds = toy_dataset(seed=6)
        val = toy_dataset(seed=7)
        m = dense_model(seed=9)
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        policy = LrPolicy(0.05, step_size=20, total_iterations=60)
        result = train(m, ds, val, schedule, policy, batch_size=6, seed=3)
        assert evaluate(result.best_model, val) == result.best_accuracy
        assert result.best_accuracy == max(acc for _, acc in result.trace)
        assert result.best_iteration == min(
            it for it, acc in result.trace if acc == result.best_accuracy)

    def test_empty_validation_rejected(self):
        ds = toy_dataset()
        m = dense_model()
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        policy = LrPolicy(0.05, 10, 20)

        class EmptySet:
            features = np.zeros((0, 4))
            labels = np.zeros(0, dtype=np.int64)

            def __len__(self):
                return 0

        # a LabeledDataset cannot even be constructed empty
        with pytest.raises(ValueError, match="no examples"):
            ds.subset([])
        with pytest.raises(ValueError, match="empty"):
            train(m, ds, EmptySet(), schedule, policy, 4, 0)

    def test_batch_size_validation(self):
        ds = toy_dataset(n_per_label=2)
        m = dense_model()
        schedule = uniform_schedule(m.stage_names, m.head_name, 1.0, 1.0)
        policy = LrPolicy(0.05, 10, 20)
        with pytest.raises(ValueError, match="batch_size"):
            train(m, ds, ds, schedule, policy, batch_size=7, seed=0)

    def test_base_lr_multiplier_equivalence(self):
        # multipliers m at base b == multipliers m/c at base c*b (mu = 0)
        ds = toy_dataset(seed=8)
        c = 4.0
        final = []
        for mult, base in ((1.0, 0.05), (1.0 / c, 0.05 * c)):
            m = dense_model(seed=10)
            schedule = uniform_schedule(m.stage_names, m.head_name, mult, mult)
            policy = LrPolicy(base, step_size=20, total_iterations=40)
            train(m, ds, ds, schedule, policy, batch_size=6, seed=4,
                  momentum=0.0)
            final.append(snapshot(m))
        for name in final[0]:
            assert np.allclose(final[0][name], final[1][name], rtol=1e-9)


def test_evaluate_on_known_predictions():
    ds = toy_dataset(seed=9, n_per_label=5)
    m = dense_model(seed=11)
    scores = m.predict(ds.features)
    expected = float((scores.argmax(axis=1) == ds.labels).mean())
    assert evaluate(m, ds) == expected
