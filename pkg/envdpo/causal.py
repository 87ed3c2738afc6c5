"""
Finite structural causal models E -> X, X -> Y, E -> Y.

Tables are small enough that interventional distributions are exact by
enumeration, which makes them an oracle for the backdoor estimator and for the
environment-shift generalization bound.
"""
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import expit, softmax

from envdpo.divergence import tv_distance
from envdpo.environments import EnvPrior
from envdpo.errors import CheckFailure, ConfigError, DimensionError, NormalizationError
from envdpo.model import LOG_LINEAR, FeatureSpec, PolicyParams, freeze_reference, init_policy
from envdpo.preference import DpoLoss, PreferenceBatch
from envdpo.utils import PathLike, read_json, substream, write_json

ROW_TOLERANCE = 1e-9
BOUND_SLACK = 1e-12
SATURATION = 0.99
SLOPE_TOLERANCE = 0.2
SLOPE_WINDOW = 10

PASS = "pass"
FAIL = "fail"
NOT_APPLICABLE = "not-applicable"


def _check_rows(table: np.ndarray, name: str) -> None:
    if np.any(table < 0) or np.any(table > 1):
        raise NormalizationError(f"{name} has entries outside [0, 1]")
    worst = np.abs(table.sum(axis=-1) - 1.0).max()
    if worst > ROW_TOLERANCE:
        raise NormalizationError(f"{name} rows deviate from 1 by up to {worst:.3g}")


@dataclass(eq=False)
class ScmSpec:
    env_features: np.ndarray
    env_prior: np.ndarray
    x_grid: np.ndarray
    x_given_e: np.ndarray
    y_given_xe: np.ndarray

    def __post_init__(self):
        self.env_features = np.atleast_2d(np.asarray(self.env_features, dtype=float))
        self.env_prior = np.asarray(self.env_prior, dtype=float)
        self.x_grid = np.atleast_2d(np.asarray(self.x_grid, dtype=float))
        self.x_given_e = np.atleast_2d(np.asarray(self.x_given_e, dtype=float))
        self.y_given_xe = np.asarray(self.y_given_xe, dtype=float)
        n_env, n_x = self.n_env, self.n_x
        if self.env_features.shape[0] != n_env:
            raise DimensionError("one env_features row per environment is required")
        if self.x_given_e.shape != (n_env, n_x):
            raise DimensionError(f"x_given_e must be {n_env}x{n_x}")
        if self.y_given_xe.ndim != 3 or self.y_given_xe.shape[:2] != (n_env, n_x):
            raise DimensionError(f"y_given_xe must be {n_env}x{n_x}x|Y|")
        _check_rows(self.env_prior, "env_prior")
        _check_rows(self.x_given_e, "x_given_e")
        _check_rows(self.y_given_xe, "y_given_xe")

    @property
    def n_env(self) -> int:
        return len(self.env_prior)

    @property
    def n_x(self) -> int:
        return len(self.x_grid)

    @property
    def n_y(self) -> int:
        return self.y_given_xe.shape[2]

    def with_prior(self, prior) -> "ScmSpec":
        return ScmSpec(
            self.env_features, prior, self.x_grid, self.x_given_e, self.y_given_xe
        )

    def x_marginal(self) -> np.ndarray:
        return self.env_prior @ self.x_given_e

    def env_given_x(self, fallback_to_prior: bool = False) -> np.ndarray:
        """p(e | x) as an (|X|, |E|) table."""
        joint = self.env_prior[:, None] * self.x_given_e
        mass = joint.sum(axis=0)
        out = np.divide(
            joint, mass[None, :], out=np.zeros_like(joint), where=mass[None, :] > 0
        ).T
        if fallback_to_prior:
            out[mass <= 0] = self.env_prior
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env_features": self.env_features.tolist(),
            "env_prior": self.env_prior.tolist(),
            "x_grid": self.x_grid.tolist(),
            "x_given_e": self.x_given_e.tolist(),
            "y_given_xe": self.y_given_xe.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScmSpec":
        try:
            return cls(**{key: np.array(data[key], dtype=float) for key in SCM_FIELDS})
        except KeyError as err:
            raise ConfigError(f"SCM description is missing {err}") from err

    def save(self, path: PathLike) -> None:
        write_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: PathLike) -> "ScmSpec":
        return cls.from_dict(read_json(path))


SCM_FIELDS = ("env_features", "env_prior", "x_grid", "x_given_e", "y_given_xe")


def _categorical(rng: np.random.Generator, cdf_rows: np.ndarray) -> np.ndarray:
    """One draw per row of a stack of CDFs by inverse-transform sampling."""
    u = rng.random(len(cdf_rows))
    draws = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(draws, cdf_rows.shape[1] - 1)


def scm_sample(
    spec: ScmSpec, n: int, env_override=None, seed: int = 0
) -> pd.DataFrame:
    """n ancestral samples (e, x, y) as grid indices."""
    if n < 0:
        raise ConfigError(f"sample count must be nonnegative, got {n}")
    prior = spec.env_prior if env_override is None else np.asarray(env_override, float)
    if prior.shape != spec.env_prior.shape:
        raise DimensionError("environment override must match the environment count")
    _check_rows(prior, "env_override")
    rng = substream(seed, "data")
    e = _categorical(rng, np.tile(np.cumsum(prior), (n, 1)))
    x = _categorical(rng, np.cumsum(spec.x_given_e, axis=1)[e])
    y = _categorical(rng, np.cumsum(spec.y_given_xe, axis=2)[e, x])
    return pd.DataFrame({"e": e, "x": x, "y": y}, dtype=int)


def _x_index(spec: ScmSpec, x: int) -> int:
    if not isinstance(x, (int, np.integer)) or not 0 <= x < spec.n_x:
        raise ConfigError(f"x={x!r} is not an index into the {spec.n_x}-point grid")
    return int(x)


def interventional_enum(spec: ScmSpec, x: int) -> np.ndarray:
    """p(Y | do(X=x)) = sum_e p(e) p(Y | x, e)."""
    x = _x_index(spec, x)
    return spec.env_prior @ spec.y_given_xe[:, x, :]


def observational_conditional(spec: ScmSpec, x: int) -> np.ndarray:
    """p(Y | x) with E marginalized by p(e | x)."""
    x = _x_index(spec, x)
    if spec.x_marginal()[x] <= 0:
        raise ConfigError(f"x={x} has zero probability under the SCM")
    return spec.env_given_x()[x] @ spec.y_given_xe[:, x, :]


def confounding_gap(spec: ScmSpec) -> float:
    """Largest TV between observational and interventional p(Y | x) over the grid."""
    gaps = [
        tv_distance(observational_conditional(spec, x), interventional_enum(spec, x))
        for x in range(spec.n_x)
        if spec.x_marginal()[x] > 0
    ]
    return float(max(gaps)) if gaps else 0.0


CondModel = Union[np.ndarray, Callable[[int, int], np.ndarray]]


def backdoor_estimate(cond_model: CondModel, prior, x: int) -> np.ndarray:
    """sum_k p(Y | x, E=k) p(E=k) for a table or a per-environment callable."""
    p_hat = prior.p_hat if isinstance(prior, EnvPrior) else np.asarray(prior, float)
    if callable(cond_model):
        rows = np.vstack([cond_model(k, x) for k in range(len(p_hat))])
    else:
        table = np.asarray(cond_model, dtype=float)
        if table.shape[0] != len(p_hat):
            raise DimensionError(
                f"prior has {len(p_hat)} environments but the model has {table.shape[0]}"
            )
        rows = table[:, x, :]
    return p_hat @ rows


def estimate_tables(
    data: pd.DataFrame, n_env: int, n_x: int, n_y: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plug-in frequency estimates of p(E), p(X | E) and p(Y | X, E).

    Unobserved conditioning cells fall back to uniform rows.
    """
    counts = np.zeros((n_env, n_x, n_y))
    np.add.at(counts, (data["e"].to_numpy(), data["x"].to_numpy(), data["y"].to_numpy()), 1)
    env_counts = counts.sum(axis=(1, 2))
    prior = env_counts / max(env_counts.sum(), 1)
    xe = counts.sum(axis=2)
    x_given_e = np.where(
        xe.sum(axis=1, keepdims=True) > 0,
        xe / np.maximum(xe.sum(axis=1, keepdims=True), 1),
        1.0 / n_x,
    )
    y_given_xe = np.where(
        counts.sum(axis=2, keepdims=True) > 0,
        counts / np.maximum(counts.sum(axis=2, keepdims=True), 1),
        1.0 / n_y,
    )
    return prior, x_given_e, y_given_xe


def random_scm(
    rng: np.random.Generator,
    n_env: int,
    n_x: int,
    n_y: int,
    env_dim: int = 1,
    rest_dim: int = 1,
    floor: float = 0.5,
) -> ScmSpec:
    """Random tables, each a mix of `floor` uniform and a Dirichlet(1) draw."""

    def mix(shape):
        draws = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
        return floor / shape[-1] + (1.0 - floor) * draws

    return ScmSpec(
        env_features=rng.standard_normal((n_env, env_dim)),
        env_prior=mix((n_env,)),
        x_grid=rng.standard_normal((n_x, rest_dim)),
        x_given_e=mix((n_env, n_x)),
        y_given_xe=mix((n_env, n_x, n_y)),
    )


def _check_shared_grid(spec_train: ScmSpec, spec_test: ScmSpec) -> None:
    same = (
        spec_train.x_grid.shape == spec_test.x_grid.shape
        and spec_train.env_features.shape == spec_test.env_features.shape
        and spec_train.y_given_xe.shape == spec_test.y_given_xe.shape
        and np.array_equal(spec_train.x_grid, spec_test.x_grid)
        and np.array_equal(spec_train.env_features, spec_test.env_features)
    )
    if not same:
        raise ConfigError("train and test SCMs must share the X grid and environments")


def _env_score_table(policy: PolicyParams, spec: ScmSpec) -> np.ndarray:
    """g(x, e) = sum_y p_test(y | x, e) w_E . f_E(y, e), shape (|X|, |E|)."""
    f_env = policy.spec.f_env(spec.env_features)  # (E, A, env_dim)
    if f_env.shape[1] != spec.n_y:
        raise DimensionError("SCM action count does not match the policy")
    env_term = f_env @ policy.w_E  # (E, A)
    return np.einsum("exa,ea->xe", spec.y_given_xe, env_term)


def _gen_err_terms(policy: PolicyParams, spec_train: ScmSpec, spec_test: ScmSpec):
    _check_shared_grid(spec_train, spec_test)
    shift = spec_test.env_given_x() - spec_train.env_given_x(fallback_to_prior=True)
    g = _env_score_table(policy, spec_test)
    return np.abs((shift * g).sum(axis=1)), shift


def exact_gen_err(
    policy: PolicyParams, spec_train: ScmSpec, spec_test: ScmSpec
) -> float:
    """E_{p_test(x)} | E_test[w_E f_E] - E_train[w_E f_E] | by enumeration.

    Both inner expectations share the test mechanism p(y | x, e); only p(e | x)
    differs between them. Training contexts with zero mass use the training prior.
    """
    per_x, _ = _gen_err_terms(policy, spec_train, spec_test)
    return float(spec_test.x_marginal() @ per_x)


def empirical_gen_err(
    policy: PolicyParams, spec_train: ScmSpec, spec_test: ScmSpec, n: int, seed: int = 0
) -> float:
    """Monte Carlo over test contexts; the inner expectation stays exact."""
    per_x, _ = _gen_err_terms(policy, spec_train, spec_test)
    if n <= 0:
        raise ConfigError(f"sample count must be positive, got {n}")
    xs = scm_sample(spec_test, n, seed=seed)["x"].to_numpy()
    return float(per_x[xs].mean())


@dataclass
class BoundReport:
    gen_err: float
    bound_value: float
    C: float
    tv_mean: float
    w_norm: float

    @property
    def holds(self) -> bool:
        return self.gen_err <= self.bound_value + BOUND_SLACK

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "holds": self.holds}


def gen_err_bound(
    policy: PolicyParams,
    spec_train: ScmSpec,
    spec_test: ScmSpec,
    C: Optional[float] = None,
) -> BoundReport:
    """Both sides of GenErr <= 2 C |w_E| E_test[TV(p_train(E|x), p_test(E|x))]."""
    feature_bound = policy.spec.env_feature_bound(spec_test.env_features)
    if C is None:
        C = feature_bound
    elif C + BOUND_SLACK < feature_bound:
        raise ConfigError(
            f"C={C} does not bound the environment features (max norm {feature_bound})"
        )
    per_x, shift = _gen_err_terms(policy, spec_train, spec_test)
    p_x = spec_test.x_marginal()
    tv_mean = float(p_x @ (0.5 * np.abs(shift).sum(axis=1)))
    w_norm = float(np.linalg.norm(policy.w_E))
    return BoundReport(
        gen_err=float(p_x @ per_x),
        bound_value=2.0 * C * w_norm * tv_mean,
        C=float(C),
        tv_mean=tv_mean,
        w_norm=w_norm,
    )


@dataclass
class AmplificationConfig:
    eta: float = 0.05
    steps: int = 500
    beta: float = 2.0
    bias_strength: float = 0.9
    seed: int = 0
    n_triples: int = 2000
    action_count: int = 5
    rest_dim: int = 2
    n_x: int = 4
    env_scale: float = 0.25
    taste_strength: float = 0.0
    test_env_prior: Tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ConfigError("bias_strength must lie in [0, 1]")
        if self.action_count < 2 or self.n_triples < 1:
            raise ConfigError("need at least two actions and one triple")
        self.test_env_prior = tuple(float(p) for p in self.test_env_prior)


def amplification_world(cfg: AmplificationConfig) -> Tuple[FeatureSpec, ScmSpec, ScmSpec]:
    """Two environments with imprints +1 and -1; head actions carry +s, tail -s.

    The first environment favours head actions with strength bias_strength, the
    second favours tail actions, so p(e_1 | y_w) exceeds p(e_1 | y_l) whenever
    y_w is a head action and y_l a tail one.
    """
    rng = substream(cfg.seed, "world")
    n_head = int(np.ceil(cfg.action_count / 2))
    head = np.arange(cfg.action_count) < n_head
    env_codes = np.where(head, cfg.env_scale, -cfg.env_scale)[:, None]
    rest_codes = rng.standard_normal((cfg.action_count, cfg.rest_dim))
    spec = FeatureSpec(1, cfg.rest_dim, cfg.action_count, env_codes, rest_codes)

    x_grid = rng.standard_normal((cfg.n_x, cfg.rest_dim))
    tilt = np.where(head, 1.0 + cfg.bias_strength, 1.0 - cfg.bias_strength) / 2.0
    env_tilt = np.vstack([tilt, 1.0 - tilt])
    taste = cfg.taste_strength * (x_grid @ rest_codes.T)  # (X, A)
    logits = np.log(np.maximum(env_tilt, 1e-300))[:, None, :] + taste[None, :, :]
    y_given_xe = softmax(logits, axis=-1)
    train = ScmSpec(
        env_features=np.array([[1.0], [-1.0]]),
        env_prior=np.array([0.5, 0.5]),
        x_grid=x_grid,
        x_given_e=np.full((2, cfg.n_x), 1.0 / cfg.n_x),
        y_given_xe=y_given_xe,
    )
    return spec, train, train.with_prior(np.asarray(cfg.test_env_prior))


def preference_dataset(
    scm: ScmSpec, n: int, seed: int
) -> PreferenceBatch:
    """y_w from the SCM, y_l uniform over the remaining actions."""
    data = scm_sample(scm, n, seed=seed)
    rng = substream(seed, "negatives")
    y_w = data["y"].to_numpy()
    offset = rng.integers(1, scm.n_y, size=n)
    y_l = (y_w + offset) % scm.n_y
    e = data["e"].to_numpy()
    return PreferenceBatch(
        env=scm.env_features[e],
        rest=scm.x_grid[data["x"].to_numpy()],
        y_w=y_w,
        y_l=y_l,
        env_label=e,
    )


@dataclass
class AmplificationResult:
    trajectory: pd.DataFrame
    policy: PolicyParams
    monotonicity: str
    slope_status: str
    slope_measured: float
    slope_predicted: float
    slope_literal: float
    mean_env_gap: float
    bound: BoundReport

    @property
    def passed(self) -> bool:
        return (
            self.monotonicity != FAIL and self.slope_status != FAIL and self.bound.holds
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "monotonicity": self.monotonicity,
            "slope_status": self.slope_status,
            "slope_measured": self.slope_measured,
            "slope_predicted": self.slope_predicted,
            "slope_literal": self.slope_literal,
            "mean_env_feature_gap": self.mean_env_gap,
            "final_w_E": float(self.trajectory["w_E"].iloc[-1]),
            "bound": self.bound.to_dict(),
            "status": PASS if self.passed else FAIL,
        }


def run_amplification(cfg: AmplificationConfig) -> AmplificationResult:
    """Plain DPO on a biased dataset, tracking the spurious weight w_E."""
    spec, train_scm, test_scm = amplification_world(cfg)
    batch = preference_dataset(train_scm, cfg.n_triples, cfg.seed)
    policy = init_policy(spec, LOG_LINEAR, cfg.seed)
    reference = freeze_reference(policy)
    loss_fn = DpoLoss(cfg.beta)

    f_env = spec.f_env(batch.env)[..., 0]  # (N, A)
    rows = np.arange(len(batch))
    env_gap = f_env[rows, batch.y_w] - f_env[rows, batch.y_l]

    w_start = float(policy.w_E[0])
    records = []
    first_sigma = None
    for step in range(cfg.steps + 1):
        loss, grad, delta = loss_fn.loss_and_grad(batch, policy, reference)
        sigma = expit(delta)
        if first_sigma is None:
            first_sigma = sigma
        w_now = float(policy.w_E[0])
        records.append(
            {
                "step": step,
                "w_E": w_now,
                "delta_E": w_now - w_start,
                "loss": loss,
                "mean_sigma": float(sigma.mean()),
            }
        )
        if step < cfg.steps:
            policy = policy.plus(grad, -cfg.eta)
    trajectory = pd.DataFrame.from_records(records)

    w = trajectory["w_E"].to_numpy()
    unsaturated = trajectory["mean_sigma"].to_numpy()[:-1] < SATURATION
    increasing = np.diff(w) > 0
    if cfg.bias_strength == 0:
        monotonicity = NOT_APPLICABLE
    else:
        monotonicity = PASS if np.all(increasing[unsaturated]) else FAIL

    window = min(SLOPE_WINDOW, cfg.steps)
    slope_measured = float((w[window] - w[0]) / window)
    slope_predicted = float(cfg.eta * cfg.beta * np.mean((1.0 - first_sigma) * env_gap))
    slope_literal = float(cfg.eta * cfg.beta * np.mean(env_gap))
    if cfg.bias_strength == 0:
        slope_status = NOT_APPLICABLE
    elif abs(slope_measured - slope_predicted) <= SLOPE_TOLERANCE * abs(slope_predicted):
        slope_status = PASS
    else:
        slope_status = FAIL

    bound = gen_err_bound(policy, train_scm, test_scm)
    logger.info(
        f"Amplification: w_E {w[0]:.4f} -> {w[-1]:.4f} over {cfg.steps} steps, "
        f"monotonicity {monotonicity}, slope {slope_measured:.5f} vs "
        f"{slope_predicted:.5f} predicted"
    )
    if not bound.holds:
        logger.error(f"Generalization bound violated: {bound.to_dict()}")
    return AmplificationResult(
        trajectory=trajectory,
        policy=policy,
        monotonicity=monotonicity,
        slope_status=slope_status,
        slope_measured=slope_measured,
        slope_predicted=slope_predicted,
        slope_literal=slope_literal,
        mean_env_gap=float(env_gap.mean()),
        bound=bound,
    )


def require(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailure(message)


@dataclass
class BackdoorReport:
    exact_deviation: float
    sampled_deviation: Optional[float]
    confounding_gap: float
    n_env: int
    n_samples: int

    @property
    def unconfounded(self) -> bool:
        return self.n_env == 1 or self.confounding_gap <= BOUND_SLACK

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "unconfounded": self.unconfounded}


def _max_deviation(spec: ScmSpec, table: np.ndarray, prior: np.ndarray) -> float:
    return float(
        max(
            np.abs(backdoor_estimate(table, prior, x) - interventional_enum(spec, x)).max()
            for x in range(spec.n_x)
        )
    )


def backdoor_check(spec: ScmSpec, n_samples: int = 0, seed: int = 0) -> BackdoorReport:
    """Componentwise deviation of the backdoor estimate from enumeration over the grid,
    with the true tables and with tables estimated from n_samples draws."""
    exact = _max_deviation(spec, spec.y_given_xe, spec.env_prior)
    sampled = None
    if n_samples > 0:
        data = scm_sample(spec, n_samples, seed=seed)
        prior, _, y_given_xe = estimate_tables(data, spec.n_env, spec.n_x, spec.n_y)
        sampled = _max_deviation(spec, y_given_xe, prior)
    report = BackdoorReport(exact, sampled, confounding_gap(spec), spec.n_env, n_samples)
    logger.info(
        f"Backdoor estimate deviates by {exact:.3g} (true tables) and {sampled} "
        f"(estimated from {n_samples} samples)"
    )
    return report
