import numpy as np
import pytest

from envdpo.causal import (
    NOT_APPLICABLE,
    PASS,
    AmplificationConfig,
    ScmSpec,
    amplification_world,
    backdoor_check,
    backdoor_estimate,
    confounding_gap,
    empirical_gen_err,
    estimate_tables,
    exact_gen_err,
    gen_err_bound,
    interventional_enum,
    observational_conditional,
    preference_dataset,
    random_scm,
    require,
    run_amplification,
    scm_sample,
)
from envdpo.environments import EnvPrior
from envdpo.errors import CheckFailure, ConfigError, DimensionError, NormalizationError
from envdpo.model import LOG_LINEAR, FeatureSpec, PolicyParams


def confounded_scm() -> ScmSpec:
    """Environment 0 favours x=0 and y=0, environment 1 favours x=1 and y=1."""
    return ScmSpec(
        env_features=np.array([[1.0], [-1.0]]),
        env_prior=np.array([0.5, 0.5]),
        x_grid=np.array([[0.0], [1.0]]),
        x_given_e=np.array([[0.9, 0.1], [0.1, 0.9]]),
        y_given_xe=np.array(
            [
                [[0.8, 0.2], [0.6, 0.4]],
                [[0.3, 0.7], [0.1, 0.9]],
            ]
        ),
    )


def shifted_pair(rng: np.random.Generator):
    test = random_scm(rng, n_env=3, n_x=4, n_y=3, env_dim=2, rest_dim=1)
    other = random_scm(rng, n_env=3, n_x=4, n_y=3, env_dim=2, rest_dim=1)
    train = ScmSpec(
        test.env_features, other.env_prior, test.x_grid, other.x_given_e, other.y_given_xe
    )
    return train, test


def policy_for(rng: np.random.Generator, n_y: int = 3, env_dim: int = 2) -> PolicyParams:
    spec = FeatureSpec(
        env_dim, 1, n_y, rng.standard_normal((n_y, env_dim)), rng.standard_normal((n_y, 1))
    )
    return PolicyParams(spec, LOG_LINEAR, rng.standard_normal(env_dim), rng.standard_normal(1))


class TestScmSpec:
    def test_rows_not_normalized___fails(self):
        scm = confounded_scm()
        with pytest.raises(NormalizationError):
            ScmSpec(scm.env_features, [0.6, 0.6], scm.x_grid, scm.x_given_e, scm.y_given_xe)

    def test_table_shape_mismatch___fails(self):
        scm = confounded_scm()
        with pytest.raises(DimensionError):
            ScmSpec(scm.env_features, scm.env_prior, scm.x_grid, np.ones((2, 3)) / 3, scm.y_given_xe)

    def test_save_and_load___same_tables(self, tmp_path):
        scm = confounded_scm()
        scm.save(tmp_path / "scm.json")
        loaded = ScmSpec.load(tmp_path / "scm.json")
        assert np.array_equal(loaded.y_given_xe, scm.y_given_xe)

    def test_env_given_x___bayes_rule(self):
        assert np.allclose(confounded_scm().env_given_x(), [[0.9, 0.1], [0.1, 0.9]])


class TestSampling:
    def test_deterministic_given_seed(self):
        scm = confounded_scm()
        assert scm_sample(scm, 500, seed=3).equals(scm_sample(scm, 500, seed=3))
        assert not scm_sample(scm, 500, seed=3).equals(scm_sample(scm, 500, seed=4))

    def test_frequencies_match_tables(self):
        data = scm_sample(confounded_scm(), 20_000, seed=0)
        assert abs(data["e"].mean() - 0.5) < 0.02
        env0 = data[data["e"] == 0]
        assert abs((env0["x"] == 0).mean() - 0.9) < 0.02

    def test_env_override___shifts_environment_mix(self):
        data = scm_sample(confounded_scm(), 10_000, env_override=[0.2, 0.8], seed=0)
        assert abs(data["e"].mean() - 0.8) < 0.02

    def test_negative_count___fails(self):
        with pytest.raises(ConfigError):
            scm_sample(confounded_scm(), -1)


class TestBackdoor:
    def test_confounded___observational_differs_from_interventional(self):
        scm = confounded_scm()
        assert interventional_enum(scm, 0) == pytest.approx([0.55, 0.45])
        assert observational_conditional(scm, 0) == pytest.approx([0.75, 0.25])
        assert confounding_gap(scm) > 0.1

    def test_true_tables___equals_enumeration_on_random_scms(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            scm = random_scm(rng, n_env=3, n_x=4, n_y=5)
            for x in range(scm.n_x):
                estimate = backdoor_estimate(scm.y_given_xe, scm.env_prior, x)
                assert np.abs(estimate - interventional_enum(scm, x)).max() <= 1e-12

    def test_estimated_tables___within_two_percent(self):
        scm = random_scm(np.random.default_rng(1), n_env=2, n_x=3, n_y=3)
        data = scm_sample(scm, 100_000, seed=5)
        prior, _, y_given_xe = estimate_tables(data, scm.n_env, scm.n_x, scm.n_y)
        for x in range(scm.n_x):
            estimate = backdoor_estimate(y_given_xe, EnvPrior(prior), x)
            assert np.abs(estimate - interventional_enum(scm, x)).max() <= 0.02

    def test_callable_model___same_as_table(self):
        scm = confounded_scm()
        table_estimate = backdoor_estimate(scm.y_given_xe, scm.env_prior, 1)
        callable_estimate = backdoor_estimate(
            lambda k, x: scm.y_given_xe[k, x], scm.env_prior, 1
        )
        assert np.allclose(table_estimate, callable_estimate)

    def test_prior_model_mismatch___fails(self):
        scm = confounded_scm()
        with pytest.raises(DimensionError):
            backdoor_estimate(scm.y_given_xe, [1.0 / 3] * 3, 0)

    def test_bad_x___fails(self):
        with pytest.raises(ConfigError):
            interventional_enum(confounded_scm(), 2)

    def test_single_environment___unconfounded(self):
        scm = random_scm(np.random.default_rng(2), n_env=1, n_x=3, n_y=2)
        report = backdoor_check(scm, n_samples=0)
        assert report.exact_deviation == 0.0
        assert report.sampled_deviation is None
        assert report.unconfounded

    def test_backdoor_check___sampled_deviation_reported(self):
        report = backdoor_check(confounded_scm(), n_samples=50_000, seed=1)
        assert report.exact_deviation <= 1e-12
        assert report.sampled_deviation <= 0.02
        assert not report.unconfounded


class TestGeneralizationBound:
    def test_bound_holds_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            train, test = shifted_pair(rng)
            report = gen_err_bound(policy_for(rng), train, test)
            assert report.gen_err <= report.bound_value + 1e-12
            assert report.holds

    def test_no_shift___zero_error(self):
        rng = np.random.default_rng(12)
        _, test = shifted_pair(rng)
        assert exact_gen_err(policy_for(rng), test, test) == 0.0

    def test_zero_spurious_weight___zero_error(self):
        rng = np.random.default_rng(13)
        train, test = shifted_pair(rng)
        policy = policy_for(rng)
        policy.w_E = np.zeros(2)
        assert exact_gen_err(policy, train, test) == 0.0

    def test_empirical___close_to_exact(self):
        rng = np.random.default_rng(14)
        train, test = shifted_pair(rng)
        policy = policy_for(rng)
        report = gen_err_bound(policy, train, test)
        n = 40_000
        empirical = empirical_gen_err(policy, train, test, n, seed=0)
        assert abs(empirical - report.gen_err) <= 5 * 2 * report.C * report.w_norm / np.sqrt(n)

    def test_c_below_feature_norm___fails(self):
        rng = np.random.default_rng(15)
        train, test = shifted_pair(rng)
        with pytest.raises(ConfigError):
            gen_err_bound(policy_for(rng), train, test, C=1e-6)

    def test_different_grids___fail(self):
        rng = np.random.default_rng(16)
        train = random_scm(rng, 2, 3, 3, env_dim=2)
        test = random_scm(rng, 2, 3, 3, env_dim=2)
        with pytest.raises(ConfigError):
            exact_gen_err(policy_for(rng), train, test)


class TestAmplification:
    def test_world___head_actions_confounded_with_first_environment(self):
        cfg = AmplificationConfig()
        spec, train, test = amplification_world(cfg)
        assert spec.action_count == cfg.action_count
        assert np.allclose(test.env_prior, cfg.test_env_prior)
        assert confounding_gap(train) == 0.0
        batch = preference_dataset(train, 4000, seed=0)
        head = spec.env_codes[batch.y_w, 0] > 0
        assert batch.env[head, 0].mean() > 0.5

    def test_default_biased_run___checks_pass(self):
        result = run_amplification(AmplificationConfig())
        assert result.monotonicity == PASS
        assert result.slope_status == PASS
        assert result.bound.holds
        assert result.passed
        assert result.summary()["status"] == PASS
        trajectory = result.trajectory
        assert list(trajectory.columns) == ["step", "w_E", "delta_E", "loss", "mean_sigma"]
        assert len(trajectory) == 501
        assert trajectory["w_E"].iloc[-1] > trajectory["w_E"].iloc[0]

    def test_unbiased_run___monotonicity_not_applicable(self):
        result = run_amplification(AmplificationConfig(bias_strength=0.0, steps=20))
        assert result.monotonicity == NOT_APPLICABLE
        assert result.slope_status == NOT_APPLICABLE
        assert result.passed

    def test_invalid_config___fails(self):
        with pytest.raises(ConfigError):
            AmplificationConfig(bias_strength=1.5)


def test_require___raises_check_failure():
    with pytest.raises(CheckFailure):
        require(False, "nope")
    require(True, "fine")
