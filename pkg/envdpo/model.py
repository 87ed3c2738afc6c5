"""
Differentiable policies over a finite action set.

Every action score splits into an environment part and a task part:

    score(y | x) = w_E . f_E(y, e) + w_rest . f_rest(y, r) + b  [+ head_y . tanh(H u)]

where x = (e, r), f_E(y, e) = env_codes[y] * e and f_rest(y, r) = rest_codes[y] * r.
The bracketed term only exists for the shallow-nonlinear family. The policy is the
softmax of the scores over actions.
"""
import copy
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from envdpo.errors import ActionIndexError, ConfigError, DimensionError
from envdpo.utils import array_sha256, substream

LOG_LINEAR = "log-linear"
SHALLOW_NONLINEAR = "shallow-nonlinear"
FAMILIES = (LOG_LINEAR, SHALLOW_NONLINEAR)
INIT_SCALE = 0.1


@dataclass(eq=False)
class FeatureSpec:
    env_dim: int
    rest_dim: int
    action_count: int
    env_codes: np.ndarray = None
    rest_codes: np.ndarray = None

    def __post_init__(self):
        if self.env_dim < 1 or self.rest_dim < 1:
            raise ConfigError("env_dim and rest_dim must both be at least 1")
        if self.action_count < 2:
            raise ConfigError("action_count must be at least 2")
        if self.env_codes is None:
            self.env_codes = np.ones((self.action_count, self.env_dim))
        if self.rest_codes is None:
            self.rest_codes = np.ones((self.action_count, self.rest_dim))
        self.env_codes = np.asarray(self.env_codes, dtype=float)
        self.rest_codes = np.asarray(self.rest_codes, dtype=float)
        if self.env_codes.shape != (self.action_count, self.env_dim):
            raise DimensionError(
                f"env_codes must be {self.action_count}x{self.env_dim}, got "
                f"{self.env_codes.shape}"
            )
        if self.rest_codes.shape != (self.action_count, self.rest_dim):
            raise DimensionError(
                f"rest_codes must be {self.action_count}x{self.rest_dim}, got "
                f"{self.rest_codes.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.env_dim + self.rest_dim

    def f_env(self, env: np.ndarray) -> np.ndarray:
        """f_E for every action: (N, env_dim) -> (N, A, env_dim)."""
        return self.env_codes[None, :, :] * np.atleast_2d(env)[:, None, :]

    def f_rest(self, rest: np.ndarray) -> np.ndarray:
        return self.rest_codes[None, :, :] * np.atleast_2d(rest)[:, None, :]

    def env_feature_bound(self, env_values: np.ndarray) -> float:
        """max over actions and the given environment imprints of ||f_E||_2."""
        feats = self.f_env(np.atleast_2d(env_values))
        return float(np.linalg.norm(feats, axis=-1).max())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env_dim": self.env_dim,
            "rest_dim": self.rest_dim,
            "action_count": self.action_count,
            "env_codes": self.env_codes.tolist(),
            "rest_codes": self.rest_codes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureSpec":
        return cls(
            env_dim=int(data["env_dim"]),
            rest_dim=int(data["rest_dim"]),
            action_count=int(data["action_count"]),
            env_codes=np.array(data["env_codes"], dtype=float),
            rest_codes=np.array(data["rest_codes"], dtype=float),
        )


@dataclass(eq=False)
class Context:
    env_features: np.ndarray
    rest_features: np.ndarray

    def __post_init__(self):
        self.env_features = np.atleast_1d(np.asarray(self.env_features, dtype=float))
        self.rest_features = np.atleast_1d(np.asarray(self.rest_features, dtype=float))

    def check(self, spec: FeatureSpec) -> None:
        if self.env_features.shape != (spec.env_dim,):
            raise DimensionError(
                f"expected {spec.env_dim} env features, got {self.env_features.shape}"
            )
        if self.rest_features.shape != (spec.rest_dim,):
            raise DimensionError(
                f"expected {spec.rest_dim} rest features, got {self.rest_features.shape}"
            )

    def as_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.env_features[None, :], self.rest_features[None, :]


@dataclass(eq=False)
class PolicyParams:
    spec: FeatureSpec
    family: str
    w_E: np.ndarray
    w_rest: np.ndarray
    b: float = 0.0
    hidden: Optional[np.ndarray] = None
    head: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(
                f"Unknown policy family {self.family!r}; expected one of {FAMILIES}"
            )
        self.w_E = np.asarray(self.w_E, dtype=float).reshape(self.spec.env_dim)
        self.w_rest = np.asarray(self.w_rest, dtype=float).reshape(self.spec.rest_dim)
        self.b = float(self.b)
        if self.family == SHALLOW_NONLINEAR:
            if self.hidden is None or self.head is None:
                raise ConfigError("shallow-nonlinear policies need hidden and head")
            self.hidden = np.asarray(self.hidden, dtype=float)
            self.head = np.asarray(self.head, dtype=float)
            if self.hidden.shape[1] != self.spec.input_dim:
                raise DimensionError(
                    f"hidden must have {self.spec.input_dim} columns, got "
                    f"{self.hidden.shape[1]}"
                )
            if self.head.shape != (self.spec.action_count, self.hidden.shape[0]):
                raise DimensionError(
                    f"head must be {self.spec.action_count}x{self.hidden.shape[0]}"
                )

    @property
    def hidden_dim(self) -> int:
        return 0 if self.hidden is None else self.hidden.shape[0]

    def _blocks(self) -> List[np.ndarray]:
        blocks = [self.w_E, self.w_rest, np.array([self.b])]
        if self.family == SHALLOW_NONLINEAR:
            blocks += [self.hidden.ravel(), self.head.ravel()]
        return blocks

    def vector(self) -> np.ndarray:
        return np.concatenate(self._blocks())

    def from_vector(self, theta: np.ndarray) -> "PolicyParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.vector().size:
            raise DimensionError(
                f"parameter vector has {theta.size} entries, expected "
                f"{self.vector().size}"
            )
        de, dr = self.spec.env_dim, self.spec.rest_dim
        offset = 0
        w_E = theta[offset : offset + de]
        offset += de
        w_rest = theta[offset : offset + dr]
        offset += dr
        b = theta[offset]
        offset += 1
        hidden = head = None
        if self.family == SHALLOW_NONLINEAR:
            n_hidden = self.hidden.size
            hidden = theta[offset : offset + n_hidden].reshape(self.hidden.shape)
            offset += n_hidden
            head = theta[offset : offset + self.head.size].reshape(self.head.shape)
        return PolicyParams(
            spec=self.spec,
            family=self.family,
            w_E=w_E.copy(),
            w_rest=w_rest.copy(),
            b=float(b),
            hidden=None if hidden is None else hidden.copy(),
            head=None if head is None else head.copy(),
        )

    def zeros_like(self) -> "PolicyParams":
        return self.from_vector(np.zeros_like(self.vector()))

    def copy(self) -> "PolicyParams":
        return copy.deepcopy(self)

    def plus(self, other: "PolicyParams", scale: float = 1.0) -> "PolicyParams":
        return self.from_vector(self.vector() + scale * other.vector())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector())))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "spec": self.spec.to_dict(),
            "w_E": self.w_E.tolist(),
            "w_rest": self.w_rest.tolist(),
            "b": self.b,
            "hidden": None if self.hidden is None else self.hidden.tolist(),
            "head": None if self.head is None else self.head.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyParams":
        hidden = data.get("hidden")
        head = data.get("head")
        return cls(
            spec=FeatureSpec.from_dict(data["spec"]),
            family=data["family"],
            w_E=np.array(data["w_E"], dtype=float),
            w_rest=np.array(data["w_rest"], dtype=float),
            b=float(data["b"]),
            hidden=None if hidden is None else np.array(hidden, dtype=float),
            head=None if head is None else np.array(head, dtype=float),
        )


def init_policy(
    spec: FeatureSpec, family: str, seed: int, hidden_dim: int = 8
) -> PolicyParams:
    if family not in FAMILIES:
        raise ConfigError(f"Unknown policy family {family!r}; expected one of {FAMILIES}")
    rng = substream(seed, "init")
    w_rest = INIT_SCALE * rng.standard_normal(spec.rest_dim)
    hidden = head = None
    if family == SHALLOW_NONLINEAR:
        hidden = INIT_SCALE * rng.standard_normal((hidden_dim, spec.input_dim))
        head = INIT_SCALE * rng.standard_normal((spec.action_count, hidden_dim))
    return PolicyParams(
        spec=spec,
        family=family,
        w_E=np.zeros(spec.env_dim),
        w_rest=w_rest,
        b=0.0,
        hidden=hidden,
        head=head,
    )


def _as_batch(env: np.ndarray, rest: np.ndarray, spec: FeatureSpec):
    env = np.atleast_2d(np.asarray(env, dtype=float))
    rest = np.atleast_2d(np.asarray(rest, dtype=float))
    if env.shape[1] != spec.env_dim or rest.shape[1] != spec.rest_dim:
        raise DimensionError(
            f"context dims ({env.shape[1]}, {rest.shape[1]}) do not match "
            f"({spec.env_dim}, {spec.rest_dim})"
        )
    if env.shape[0] != rest.shape[0]:
        raise DimensionError("env and rest feature batches differ in length")
    return env, rest


def _hidden_activations(policy: PolicyParams, env: np.ndarray, rest: np.ndarray):
    inputs = np.hstack([env, rest])
    return inputs, np.tanh(inputs @ policy.hidden.T)


def scores(policy: PolicyParams, env: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """Unnormalized action scores, shape (N, A)."""
    spec = policy.spec
    env, rest = _as_batch(env, rest, spec)
    out = (env * policy.w_E) @ spec.env_codes.T + (rest * policy.w_rest) @ spec.rest_codes.T
    out = out + policy.b
    if policy.family == SHALLOW_NONLINEAR:
        _, h = _hidden_activations(policy, env, rest)
        out = out + h @ policy.head.T
    return out


def log_softmax_scores(action_scores: np.ndarray) -> np.ndarray:
    # scipy subtracts the row max before exponentiating
    return log_softmax(np.asarray(action_scores, dtype=float), axis=-1)


def log_probs(policy: PolicyParams, env: np.ndarray, rest: np.ndarray) -> np.ndarray:
    return log_softmax_scores(scores(policy, env, rest))


def probs(policy: PolicyParams, env: np.ndarray, rest: np.ndarray) -> np.ndarray:
    return softmax(scores(policy, env, rest), axis=-1)


def check_actions(actions: np.ndarray, action_count: int) -> np.ndarray:
    actions = np.atleast_1d(np.asarray(actions))
    if actions.size and (
        not np.issubdtype(actions.dtype, np.integer)
        or actions.min() < 0
        or actions.max() >= action_count
    ):
        raise ActionIndexError(f"action indices must lie in [0, {action_count})")
    return actions.astype(int)


def log_prob(policy: PolicyParams, x: Context, y: int) -> float:
    x.check(policy.spec)
    (y,) = check_actions(np.array([y]), policy.spec.action_count)
    return float(log_probs(policy, *x.as_batch())[0, y])


def backward(
    policy: PolicyParams, env: np.ndarray, rest: np.ndarray, grad_scores: np.ndarray
) -> PolicyParams:
    """Pull a gradient w.r.t. the (N, A) score matrix back onto the parameters."""
    spec = policy.spec
    env, rest = _as_batch(env, rest, spec)
    grad_scores = np.asarray(grad_scores, dtype=float)
    g_w_E = ((grad_scores @ spec.env_codes) * env).sum(axis=0)
    g_w_rest = ((grad_scores @ spec.rest_codes) * rest).sum(axis=0)
    g_b = float(grad_scores.sum())
    g_hidden = g_head = None
    if policy.family == SHALLOW_NONLINEAR:
        inputs, h = _hidden_activations(policy, env, rest)
        g_head = grad_scores.T @ h
        g_pre = (grad_scores @ policy.head) * (1.0 - h**2)
        g_hidden = g_pre.T @ inputs
    return PolicyParams(
        spec=spec,
        family=policy.family,
        w_E=g_w_E,
        w_rest=g_w_rest,
        b=g_b,
        hidden=g_hidden,
        head=g_head,
    )


def log_prob_grad_batch(
    policy: PolicyParams,
    env: np.ndarray,
    rest: np.ndarray,
    actions: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> PolicyParams:
    """Gradient of sum_n weights_n * log pi(actions_n | x_n)."""
    actions = check_actions(actions, policy.spec.action_count)
    pi = probs(policy, env, rest)
    onehot = np.zeros_like(pi)
    onehot[np.arange(len(actions)), actions] = 1.0
    if weights is None:
        weights = np.ones(len(actions))
    return backward(policy, env, rest, (onehot - pi) * np.asarray(weights)[:, None])


def log_prob_grad(policy: PolicyParams, x: Context, y: int) -> PolicyParams:
    x.check(policy.spec)
    return log_prob_grad_batch(policy, *x.as_batch(), np.array([y]))


def hidden_repr_batch(policy: PolicyParams, env: np.ndarray, rest: np.ndarray):
    env, rest = _as_batch(env, rest, policy.spec)
    if policy.family == LOG_LINEAR:
        return np.hstack([env, rest])
    _, h = _hidden_activations(policy, env, rest)
    return h


def hidden_repr(policy: PolicyParams, x: Context) -> np.ndarray:
    x.check(policy.spec)
    return hidden_repr_batch(policy, *x.as_batch())[0]


def hidden_repr_backward(
    policy: PolicyParams, env: np.ndarray, rest: np.ndarray, grad_h: np.ndarray
) -> PolicyParams:
    """Gradient of <grad_h, hidden_repr> w.r.t. the parameters.

    The log-linear representation is the raw context, so only the hidden
    matrix of the nonlinear family receives anything.
    """
    grad = policy.zeros_like()
    if policy.family == SHALLOW_NONLINEAR:
        env, rest = _as_batch(env, rest, policy.spec)
        inputs, h = _hidden_activations(policy, env, rest)
        grad.hidden = ((np.asarray(grad_h) * (1.0 - h**2)).T @ inputs)
    return grad


@dataclass(frozen=True, eq=False)
class ReferencePolicy:
    params: PolicyParams

    def log_probs(self, env: np.ndarray, rest: np.ndarray) -> np.ndarray:
        return log_probs(self.params, env, rest)

    def log_prob(self, x: Context, y: int) -> float:
        return log_prob(self.params, x, y)

    def fingerprint(self, env: np.ndarray, rest: np.ndarray) -> str:
        """sha256 of the log-probabilities on a probe batch."""
        return array_sha256(self.log_probs(env, rest))


def _read_only(arr: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if arr is None:
        return None
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def freeze_reference(policy: PolicyParams) -> ReferencePolicy:
    frozen = copy.deepcopy(policy)
    frozen.w_E = _read_only(frozen.w_E)
    frozen.w_rest = _read_only(frozen.w_rest)
    frozen.hidden = _read_only(frozen.hidden)
    frozen.head = _read_only(frozen.head)
    return ReferencePolicy(params=frozen)
