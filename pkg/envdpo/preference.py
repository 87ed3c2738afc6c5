"""
DPO reward, loss, analytic gradient and preference accuracy.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from envdpo.errors import ConfigError, EmptyBatchError, InputError
from envdpo.model import (
    Context,
    FeatureSpec,
    PolicyParams,
    ReferencePolicy,
    backward,
    check_actions,
    log_prob,
    log_probs,
)
from envdpo.utils import PathLike, iter_jsonl, write_jsonl

NO_ENV_LABEL = -1


@dataclass(eq=False)
class PreferenceTriple:
    x: Context
    y_w: int
    y_l: int
    env_label: Optional[int] = None

    def __post_init__(self):
        if self.y_w == self.y_l:
            raise ConfigError(f"preferred and dispreferred actions coincide ({self.y_w})")


@dataclass
class DpoConfig:
    beta: float = 2.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


class PreferenceBatch:
    """Column-wise view of a list of triples."""

    def __init__(
        self,
        env: np.ndarray,
        rest: np.ndarray,
        y_w: np.ndarray,
        y_l: np.ndarray,
        env_label: Optional[np.ndarray] = None,
    ):
        self.env = np.atleast_2d(np.asarray(env, dtype=float))
        self.rest = np.atleast_2d(np.asarray(rest, dtype=float))
        self.y_w = np.asarray(y_w, dtype=int)
        self.y_l = np.asarray(y_l, dtype=int)
        if env_label is None:
            env_label = np.full(len(self.y_w), NO_ENV_LABEL)
        self.env_label = np.asarray(env_label, dtype=int)
        if np.any(self.y_w == self.y_l):
            raise ConfigError("preferred and dispreferred actions coincide")

    def __len__(self) -> int:
        return len(self.y_w)

    def subset(self, idx: Sequence[int]) -> "PreferenceBatch":
        idx = np.asarray(idx, dtype=int)
        return PreferenceBatch(
            self.env[idx], self.rest[idx], self.y_w[idx], self.y_l[idx], self.env_label[idx]
        )

    def check(self, spec: FeatureSpec) -> None:
        check_actions(self.y_w, spec.action_count)
        check_actions(self.y_l, spec.action_count)

    @classmethod
    def from_triples(cls, triples: Sequence[PreferenceTriple]) -> "PreferenceBatch":
        if not triples:
            raise EmptyBatchError("preference batch is empty")
        return cls(
            env=np.vstack([t.x.env_features for t in triples]),
            rest=np.vstack([t.x.rest_features for t in triples]),
            y_w=np.array([t.y_w for t in triples]),
            y_l=np.array([t.y_l for t in triples]),
            env_label=np.array(
                [NO_ENV_LABEL if t.env_label is None else t.env_label for t in triples]
            ),
        )

    def triples(self) -> List[PreferenceTriple]:
        return [
            PreferenceTriple(
                x=Context(self.env[i], self.rest[i]),
                y_w=int(self.y_w[i]),
                y_l=int(self.y_l[i]),
                env_label=None
                if self.env_label[i] == NO_ENV_LABEL
                else int(self.env_label[i]),
            )
            for i in range(len(self))
        ]


BatchLike = Union[PreferenceBatch, Sequence[PreferenceTriple]]


def as_batch(batch: BatchLike) -> PreferenceBatch:
    if isinstance(batch, PreferenceBatch):
        if len(batch) == 0:
            raise EmptyBatchError("preference batch is empty")
        return batch
    return PreferenceBatch.from_triples(list(batch))


def _chosen(lp: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return lp[np.arange(len(actions)), actions]


def reward(
    policy: PolicyParams, reference: ReferencePolicy, x: Context, y: int, beta: float
) -> float:
    return beta * (log_prob(policy, x, y) - reference.log_prob(x, y))


def margins(
    batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy, beta: float
) -> np.ndarray:
    """Reward margins r(x, y_w) - r(x, y_l) per triple."""
    batch = as_batch(batch)
    batch.check(policy.spec)
    lp = log_probs(policy, batch.env, batch.rest)
    lp_ref = reference.log_probs(batch.env, batch.rest)
    ratio_w = _chosen(lp, batch.y_w) - _chosen(lp_ref, batch.y_w)
    ratio_l = _chosen(lp, batch.y_l) - _chosen(lp_ref, batch.y_l)
    return beta * (ratio_w - ratio_l)


class PreferenceLoss(ABC):
    """A pairwise preference objective over a policy and a frozen reference."""

    @abstractmethod
    def per_example(self, delta: np.ndarray) -> np.ndarray:
        """Loss per triple as a function of the reward margin."""

    @abstractmethod
    def margin_weight(self, delta: np.ndarray) -> np.ndarray:
        """d loss / d margin per triple."""

    def __init__(self, beta: float = 2.0):
        self.beta = DpoConfig(beta).beta

    def loss(
        self, batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy
    ) -> float:
        return float(np.mean(self.per_example(margins(batch, policy, reference, self.beta))))

    def loss_and_grad(
        self, batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy
    ) -> Tuple[float, PolicyParams, np.ndarray]:
        """Mean loss, its gradient, and the margins it was computed from."""
        batch = as_batch(batch)
        delta = margins(batch, policy, reference, self.beta)
        n = len(batch)
        # softmax normalizers cancel between y_w and y_l
        coef = self.beta * self.margin_weight(delta) / n
        grad_scores = np.zeros((n, policy.spec.action_count))
        rows = np.arange(n)
        grad_scores[rows, batch.y_w] += coef
        grad_scores[rows, batch.y_l] -= coef
        grad = backward(policy, batch.env, batch.rest, grad_scores)
        return float(np.mean(self.per_example(delta))), grad, delta

    def grad(
        self, batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy
    ) -> PolicyParams:
        return self.loss_and_grad(batch, policy, reference)[1]


class DpoLoss(PreferenceLoss):
    def per_example(self, delta: np.ndarray) -> np.ndarray:
        # -log sigmoid(z), exact for large |z|
        return -log_expit(delta)

    def margin_weight(self, delta: np.ndarray) -> np.ndarray:
        return -expit(-delta)


def dpo_loss(
    batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy, beta: float
) -> float:
    return DpoLoss(beta).loss(batch, policy, reference)


def dpo_grad(
    batch: BatchLike, policy: PolicyParams, reference: ReferencePolicy, beta: float
) -> PolicyParams:
    return DpoLoss(beta).grad(batch, policy, reference)


def preference_accuracy(batch: BatchLike, policy: PolicyParams) -> float:
    """Share of triples where the policy strictly prefers y_w; ties count as misses."""
    batch = as_batch(batch)
    batch.check(policy.spec)
    lp = log_probs(policy, batch.env, batch.rest)
    return float(np.mean(_chosen(lp, batch.y_w) > _chosen(lp, batch.y_l)))


def triple_to_record(triple: PreferenceTriple) -> dict:
    record = {
        "env_features": triple.x.env_features.tolist(),
        "rest_features": triple.x.rest_features.tolist(),
        "y_w": int(triple.y_w),
        "y_l": int(triple.y_l),
    }
    if triple.env_label is not None:
        record["env_label"] = int(triple.env_label)
    return record


def write_triples(triples: Iterable[PreferenceTriple], path: PathLike) -> None:
    write_jsonl((triple_to_record(t) for t in triples), path)


def load_triples(path: PathLike) -> List[PreferenceTriple]:
    triples = []
    for lineno, record in enumerate(iter_jsonl(path), start=1):
        try:
            triples.append(
                PreferenceTriple(
                    x=Context(record["env_features"], record["rest_features"]),
                    y_w=int(record["y_w"]),
                    y_l=int(record["y_l"]),
                    env_label=record.get("env_label"),
                )
            )
        except KeyError as err:
            raise InputError(f"{path}:{lineno} is missing field {err}") from err
    return triples


def load_batch(path: PathLike) -> PreferenceBatch:
    triples = load_triples(path)
    if not triples:
        raise InputError(f"{path} holds no preference triples")
    return PreferenceBatch.from_triples(triples)
