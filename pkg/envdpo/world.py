"""
Synthetic confounded recommendation world.

Items carry a popularity code (the environment-imprinted feature) and a latent
taste code. Users live in one of two environments whose observable imprint is
+1 (conformist) or -1 (niche). Conformists lean harder on popularity than
niche users and favour their own half of the archetypes, so the environment
drives both who is asked and what gets picked. The policy can only express
popularity through the imprint, and an environment-imbalanced training log
rewards a spurious w_E > 0 that hurts the minority environment and tail items.
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import softmax

from envdpo.causal import ScmSpec
from envdpo.errors import ConfigError, InputError
from envdpo.evalrec import InteractionLog
from envdpo.model import FeatureSpec
from envdpo.preference import PreferenceBatch
from envdpo.utils import substream

ENV_IMPRINTS = (1.0, -1.0)


@dataclass
class WorldConfig:
    n_items: int = 24
    taste_dim: int = 4
    n_archetypes: int = 8
    taste_strength: float = 1.5
    pop_strength: Tuple[float, float] = (2.0, 1.5)
    imprint_noise: float = 0.1
    env_prior: Tuple[float, float] = (0.8, 0.2)
    archetype_skew: float = 0.5
    per_user: int = 20
    n_interactions: int = 4000
    ood_env_prior: Tuple[float, float] = (0.2, 0.8)
    shifted_interactions: int = 1000

    def __post_init__(self):
        self.env_prior = tuple(float(p) for p in self.env_prior)
        self.ood_env_prior = tuple(float(p) for p in self.ood_env_prior)
        if np.ndim(self.pop_strength) == 0:
            self.pop_strength = (self.pop_strength, self.pop_strength)
        self.pop_strength = tuple(float(p) for p in self.pop_strength)
        if self.n_items < 2 or self.taste_dim < 1 or self.n_archetypes < 1:
            raise ConfigError("the world needs two items, a taste dim and an archetype")
        for name in ("env_prior", "ood_env_prior"):
            prior = getattr(self, name)
            if len(prior) != 2 or min(prior) < 0 or abs(sum(prior) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be two probabilities summing to 1")
        if self.per_user < 1 or self.n_interactions < 1 or self.shifted_interactions < 0:
            raise ConfigError("per_user and n_interactions must be positive")
        if not 0.0 <= self.archetype_skew < 1.0:
            raise ConfigError("archetype_skew must lie in [0, 1)")
        if len(self.pop_strength) != 2:
            raise ConfigError("pop_strength needs one value per environment")


@dataclass(eq=False)
class World:
    cfg: WorldConfig
    spec: FeatureSpec
    archetypes: np.ndarray
    x_given_e: np.ndarray
    env_prior: np.ndarray = field(default=None)

    @property
    def popularity_codes(self) -> np.ndarray:
        return self.spec.env_codes[:, 0]

    @property
    def taste_codes(self) -> np.ndarray:
        return self.spec.rest_codes

    def choice_probs(self, taste: np.ndarray, pop_strength) -> np.ndarray:
        """Item choice rows; pop_strength is a scalar or one value per row."""
        pop_strength = np.reshape(np.asarray(pop_strength, dtype=float), (-1, 1))
        logits = self.cfg.taste_strength * (np.atleast_2d(taste) @ self.taste_codes.T)
        return softmax(logits + pop_strength * self.popularity_codes, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": asdict(self.cfg),
            "spec": self.spec.to_dict(),
            "archetypes": self.archetypes.tolist(),
            "x_given_e": self.x_given_e.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "World":
        cfg = WorldConfig(**data["config"])
        return cls(
            cfg=cfg,
            spec=FeatureSpec.from_dict(data["spec"]),
            archetypes=np.array(data["archetypes"], dtype=float),
            x_given_e=np.array(data["x_given_e"], dtype=float),
            env_prior=np.array(cfg.env_prior),
        )


def make_world(cfg: WorldConfig, seed: int) -> World:
    rng = substream(seed, "world")
    popularity = np.linspace(1.0, -1.0, cfg.n_items)[:, None]
    taste = rng.standard_normal((cfg.n_items, cfg.taste_dim))
    spec = FeatureSpec(1, cfg.taste_dim, cfg.n_items, popularity, taste)
    archetypes = rng.standard_normal((cfg.n_archetypes, cfg.taste_dim))
    archetypes /= np.linalg.norm(archetypes, axis=1, keepdims=True)

    # the conformist environment leans towards the first half of the archetypes
    uniform = np.full(cfg.n_archetypes, 1.0 / cfg.n_archetypes)
    lean = np.where(np.arange(cfg.n_archetypes) < cfg.n_archetypes / 2, 1.0, 0.0)
    lean = lean / lean.sum() if lean.sum() else uniform
    conformist = (1.0 - cfg.archetype_skew) * uniform + cfg.archetype_skew * lean
    x_given_e = np.vstack([conformist, uniform])
    return World(cfg, spec, archetypes, x_given_e, np.array(cfg.env_prior))


def world_scm(world: World, prior=None) -> ScmSpec:
    """The world as a finite SCM over (imprint, archetype, item)."""
    prior = world.env_prior if prior is None else np.asarray(prior, dtype=float)
    y_given_xe = np.stack(
        [
            world.choice_probs(world.archetypes, strength)
            for strength in world.cfg.pop_strength
        ]
    )
    return ScmSpec(
        env_features=np.array(ENV_IMPRINTS)[:, None],
        env_prior=prior,
        x_grid=world.archetypes,
        x_given_e=world.x_given_e,
        y_given_xe=y_given_xe,
    )


def _draw(rng: np.random.Generator, prob_rows: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(prob_rows, axis=1)
    u = rng.random(len(prob_rows))
    return np.minimum((u[:, None] >= cdf).sum(axis=1), prob_rows.shape[1] - 1)


def simulate_users(
    world: World, n_users: int, seed: int, prior=None, stream: int = 0
) -> pd.DataFrame:
    prior = world.env_prior if prior is None else np.asarray(prior, dtype=float)
    rng = substream(seed, "users", stream)
    env_label = _draw(rng, np.tile(prior, (n_users, 1)))
    archetype = _draw(rng, world.x_given_e[env_label])
    imprint = np.array(ENV_IMPRINTS)[env_label]
    imprint = imprint + world.cfg.imprint_noise * rng.standard_normal(n_users)
    users = pd.DataFrame(
        {"user_id": np.arange(n_users), "env_label": env_label, "archetype": archetype}
    )
    users["env_0"] = imprint
    for d in range(world.cfg.taste_dim):
        users[f"rest_{d}"] = world.archetypes[archetype, d]
    return users


def user_features(users: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    env_cols = [c for c in users.columns if c.startswith("env_") and c != "env_label"]
    rest_cols = [c for c in users.columns if c.startswith("rest_")]
    if not env_cols or not rest_cols:
        raise InputError("user table needs env_* and rest_* feature columns")
    return users[env_cols].to_numpy(float), users[rest_cols].to_numpy(float)


def simulate_log(
    world: World, n: int, seed: int, prior=None, stream: int = 0
) -> Tuple[InteractionLog, pd.DataFrame]:
    """n interactions from n // per_user users, the remainder spread one each.

    `stream` separates independent populations drawn with the same seed.
    """
    n_users = max(1, n // world.cfg.per_user)
    users = simulate_users(world, n_users, seed, prior, stream)
    per_user = np.full(n_users, n // n_users)
    per_user[: n % n_users] += 1

    rng = substream(seed, "interactions", stream)
    user_of_row = np.repeat(users["user_id"].to_numpy(), per_user)
    taste = world.archetypes[users["archetype"].to_numpy()][user_of_row]
    env_of_row = users["env_label"].to_numpy()[user_of_row]
    observed = world.choice_probs(taste, np.array(world.cfg.pop_strength)[env_of_row])
    item = _draw(rng, observed)
    exposed = _draw(rng, world.choice_probs(taste, 0.0))

    start = rng.integers(0, 1_000, size=n_users)[user_of_row]
    step_in_user = np.concatenate([np.arange(k) for k in per_user])
    affinity = (taste * world.taste_codes[item]).sum(axis=1)
    rating = 1 + np.rint(4.0 / (1.0 + np.exp(-world.cfg.taste_strength * affinity)))
    frame = pd.DataFrame(
        {
            "user_id": user_of_row,
            "item_id": item,
            "timestamp": start + step_in_user,
            "rating": rating.astype(int),
            "env_label": env_of_row,
            "exposed_item_id": exposed,
        }
    )
    logger.debug(
        f"Simulated {n} interactions for {n_users} users, environment shares "
        f"{np.bincount(users['env_label'], minlength=2) / n_users}"
    )
    return InteractionLog(frame), users


def to_triples(
    log: InteractionLog, users: pd.DataFrame, action_count: int, seed: int
) -> PreferenceBatch:
    """y_w = interacted item, y_l uniform over the other items."""
    frame = log.frame
    if frame.empty:
        raise InputError("cannot build preference triples from an empty log")
    env, rest = user_features(users.set_index("user_id").loc[frame["user_id"]].reset_index())
    rng = substream(seed, "negatives")
    y_w = frame["item_id"].to_numpy(int)
    y_l = (y_w + rng.integers(1, action_count, size=len(y_w))) % action_count
    env_label = frame["env_label"].to_numpy(int) if "env_label" in frame else None
    return PreferenceBatch(env, rest, y_w, y_l, env_label)


def contexts_for(log: InteractionLog, users: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    return user_features(users.set_index("user_id").loc[log.frame["user_id"]].reset_index())


def env_shares(users: pd.DataFrame) -> List[float]:
    counts = np.bincount(users["env_label"].to_numpy(int), minlength=len(ENV_IMPRINTS))
    return (counts / counts.sum()).tolist()
