import numpy as np
import pytest

from envdpo.errors import ConfigError, EmptyBatchError, InputError
from envdpo.model import (
    LOG_LINEAR,
    SHALLOW_NONLINEAR,
    Context,
    FeatureSpec,
    PolicyParams,
    freeze_reference,
    init_policy,
    log_prob,
)
from envdpo.preference import (
    DpoLoss,
    PreferenceBatch,
    PreferenceTriple,
    dpo_grad,
    dpo_loss,
    load_batch,
    load_triples,
    margins,
    preference_accuracy,
    reward,
    write_triples,
)
from envdpo.utils import numerical_gradient, relative_error


def toy_batch(n: int = 8, seed: int = 0, action_count: int = 4) -> PreferenceBatch:
    rng = np.random.default_rng(seed)
    y_w = rng.integers(0, action_count, size=n)
    y_l = (y_w + rng.integers(1, action_count, size=n)) % action_count
    return PreferenceBatch(
        rng.standard_normal((n, 1)), rng.standard_normal((n, 2)), y_w, y_l
    )


def toy_spec(action_count: int = 4) -> FeatureSpec:
    rng = np.random.default_rng(42)
    return FeatureSpec(
        1,
        2,
        action_count,
        rng.standard_normal((action_count, 1)),
        rng.standard_normal((action_count, 2)),
    )


class TestPreferenceTriple:
    def test_same_actions___fails(self):
        with pytest.raises(ConfigError):
            PreferenceTriple(Context([0.0], [0.0, 0.0]), 2, 2)

    def test_batch_from_no_triples___fails(self):
        with pytest.raises(EmptyBatchError):
            PreferenceBatch.from_triples([])


class TestDpoLoss:
    def test_policy_equals_reference___loss_is_log_two(self):
        spec = toy_spec()
        policy = init_policy(spec, LOG_LINEAR, seed=0)
        reference = freeze_reference(policy)
        assert dpo_loss(toy_batch(), policy, reference, beta=2.0) == pytest.approx(np.log(2.0))

    def test_reward___zero_at_reference(self):
        spec = toy_spec()
        policy = init_policy(spec, LOG_LINEAR, seed=0)
        x = Context([0.3], [1.0, -1.0])
        assert reward(policy, freeze_reference(policy), x, 1, beta=2.0) == 0.0

    def test_large_margin___loss_stays_finite(self):
        spec = FeatureSpec(1, 1, 2, np.array([[1.0], [-1.0]]), np.zeros((2, 1)))
        reference = freeze_reference(PolicyParams(spec, LOG_LINEAR, [0.0], [0.0]))
        policy = PolicyParams(spec, LOG_LINEAR, [-500.0], [0.0])
        batch = PreferenceBatch(np.ones((1, 1)), np.zeros((1, 1)), [0], [1])
        loss = dpo_loss(batch, policy, reference, beta=2.0)
        assert np.isfinite(loss)
        assert loss == pytest.approx(2000.0)

    def test_empty_batch___fails(self):
        spec = toy_spec()
        policy = init_policy(spec, LOG_LINEAR, seed=0)
        with pytest.raises(EmptyBatchError):
            dpo_loss([], policy, freeze_reference(policy), beta=2.0)

    def test_nonpositive_beta___fails(self):
        with pytest.raises(ConfigError):
            DpoLoss(beta=0.0)

    @pytest.mark.parametrize("family", [LOG_LINEAR, SHALLOW_NONLINEAR])
    def test_gradient___matches_finite_differences(self, family):
        spec = toy_spec()
        reference = freeze_reference(init_policy(spec, family, seed=1, hidden_dim=3))
        base = init_policy(spec, family, seed=2, hidden_dim=3)
        rng = np.random.default_rng(3)
        worst = 0.0
        for sample_seed in range(200):
            start = base.from_vector(base.vector() + 0.5 * rng.standard_normal(base.vector().size))
            batch = toy_batch(10, seed=sample_seed)

            def objective(theta):
                return dpo_loss(batch, start.from_vector(theta), reference, beta=2.0)

            numeric = numerical_gradient(objective, start.vector())
            analytic = dpo_grad(batch, start, reference, beta=2.0).vector()
            worst = max(worst, relative_error(analytic, numeric).max())
        assert worst <= 1e-4

    def test_popular_winners___spurious_weight_gradient_negative(self):
        spec = FeatureSpec(
            1, 2, 4, np.array([[1.0], [0.5], [-0.5], [-1.0]]), toy_spec().rest_codes
        )
        rng = np.random.default_rng(8)
        n = 16
        y_w = rng.integers(0, 2, size=n)
        y_l = rng.integers(2, 4, size=n)
        batch = PreferenceBatch(np.ones((n, 1)), rng.standard_normal((n, 2)), y_w, y_l)
        assert np.mean(spec.env_codes[y_w, 0] - spec.env_codes[y_l, 0]) > 0
        for seed in range(20):
            policy = init_policy(spec, LOG_LINEAR, seed=seed)
            policy.w_E = rng.normal(size=1)
            reference = freeze_reference(init_policy(spec, LOG_LINEAR, seed=seed + 100))
            assert dpo_grad(batch, policy, reference, beta=2.0).w_E[0] < 0.0

    def test_saturated_margin___vanishing_loss_and_gradient(self):
        spec = FeatureSpec(1, 1, 2, np.array([[1.0], [-1.0]]), np.zeros((2, 1)))
        reference = freeze_reference(PolicyParams(spec, LOG_LINEAR, [0.0], [0.0]))
        # scores differ by 2 w_E, so the margin is beta * 2 * 12.5 = 50
        policy = PolicyParams(spec, LOG_LINEAR, [12.5], [0.0])
        batch = PreferenceBatch(np.ones((1, 1)), np.zeros((1, 1)), [0], [1])
        assert margins(batch, policy, reference, 2.0)[0] == pytest.approx(50.0)
        assert dpo_loss(batch, policy, reference, beta=2.0) < 1e-20
        assert np.linalg.norm(dpo_grad(batch, policy, reference, beta=2.0).vector()) < 1e-8

    def test_loss_never_rises_with_winner_log_prob(self):
        spec = FeatureSpec(1, 1, 3, np.array([[1.0], [0.0], [0.0]]), np.zeros((3, 1)))
        reference = freeze_reference(PolicyParams(spec, LOG_LINEAR, [0.0], [0.0]))
        batch = PreferenceBatch(np.ones((1, 1)), np.zeros((1, 1)), [0], [1])
        losses, winner = [], []
        for w in np.linspace(-3.0, 3.0, 61):
            policy = PolicyParams(spec, LOG_LINEAR, [w], [0.0])
            losses.append(dpo_loss(batch, policy, reference, beta=2.0))
            winner.append(log_prob(policy, Context([1.0], [0.0]), 0))
        assert np.all(np.diff(winner) > 0)
        assert np.all(np.diff(losses) <= 0)

    def test_plain_descent___loss_falls_every_step(self):
        spec = FeatureSpec(1, 1, 3, np.array([[1.0], [0.0], [-1.0]]), np.zeros((3, 1)))
        policy = PolicyParams(spec, LOG_LINEAR, [0.0], [0.0])
        reference = freeze_reference(policy)
        batch = PreferenceBatch(np.ones((4, 1)), np.zeros((4, 1)), [0, 0, 1, 0], [1, 2, 2, 2])
        losses = [dpo_loss(batch, policy, reference, beta=2.0)]
        for _ in range(50):
            policy = policy.plus(dpo_grad(batch, policy, reference, beta=2.0), -0.05)
            losses.append(dpo_loss(batch, policy, reference, beta=2.0))
        assert np.all(np.diff(losses) < 0)

    def test_loss_and_grad___margins_match_margins(self):
        spec = toy_spec()
        reference = freeze_reference(init_policy(spec, LOG_LINEAR, seed=1))
        policy = init_policy(spec, LOG_LINEAR, seed=2)
        batch = toy_batch()
        _, _, delta = DpoLoss(2.0).loss_and_grad(batch, policy, reference)
        assert np.allclose(delta, margins(batch, policy, reference, 2.0))


class TestPreferenceAccuracy:
    def test_ties_count_as_misses(self):
        spec = toy_spec()
        uniform = PolicyParams(spec, LOG_LINEAR, np.zeros(1), np.zeros(2))
        assert preference_accuracy(toy_batch(), uniform) == 0.0

    def test_policy_that_prefers_winners___perfect(self):
        spec = FeatureSpec(1, 1, 2, np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
        policy = PolicyParams(spec, LOG_LINEAR, [0.0], [1.0])
        batch = PreferenceBatch(np.zeros((3, 1)), np.ones((3, 1)), [0, 0, 0], [1, 1, 1])
        assert preference_accuracy(batch, policy) == 1.0

    def test_two_of_three_correct(self):
        spec = FeatureSpec(1, 1, 2, np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
        policy = PolicyParams(spec, LOG_LINEAR, [0.0], [1.0])
        batch = PreferenceBatch(np.zeros((3, 1)), np.ones((3, 1)), [0, 0, 1], [1, 1, 0])
        assert preference_accuracy(batch, policy) == pytest.approx(0.6667, abs=1e-4)


class TestTripleFiles:
    def test_write_then_load___same_batch(self, tmp_path):
        batch = toy_batch(5)
        batch.env_label[:] = [0, 1, 0, 1, 1]
        path = tmp_path / "triples.jsonl"
        write_triples(batch.triples(), path)
        loaded = load_batch(path)
        assert np.array_equal(loaded.env, batch.env)
        assert np.array_equal(loaded.rest, batch.rest)
        assert np.array_equal(loaded.y_w, batch.y_w)
        assert np.array_equal(loaded.env_label, batch.env_label)

    def test_missing_file___fails(self, tmp_path):
        with pytest.raises(InputError):
            load_triples(tmp_path / "absent.jsonl")

    def test_record_without_y_l___fails(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"env_features": [0.0], "rest_features": [0.0], "y_w": 1}\n')
        with pytest.raises(InputError):
            load_triples(path)

    def test_empty_file___fails(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(InputError):
            load_batch(path)
