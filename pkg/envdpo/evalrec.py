"""
Interaction logs, distribution-shift splits and single-target ranking metrics.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import logsumexp

from envdpo.errors import ConfigError, EmptyBatchError, InputError
from envdpo.model import PolicyParams, log_probs
from envdpo.utils import PathLike, substream

REQUIRED_COLUMNS = ("user_id", "item_id", "timestamp", "rating")
OPTIONAL_COLUMNS = ("env_label", "exposed_item_id", "origin")
SHIFTS = ("iid", "popularity", "temporal", "exposure", "mixed")
PARTITIONS = ("train", "valid", "iid_test", "ood_test")


class InteractionLog:
    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
        if missing:
            raise InputError(f"interaction log is missing columns {missing}")
        frame = frame.reset_index(drop=True)
        ids = frame[["user_id", "item_id"]].to_numpy()
        if ids.size and ids.min() < 0:
            raise InputError("user and item ids must be nonnegative")
        self.frame = frame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def users(self) -> np.ndarray:
        return np.sort(self.frame["user_id"].unique())

    def popularity(self) -> pd.Series:
        """Interaction count per item."""
        return self.frame["item_id"].value_counts().sort_index()

    def filter_min_interactions(self, threshold: int) -> Tuple["InteractionLog", int]:
        counts = self.frame.groupby("user_id")["item_id"].transform("size")
        kept = self.frame[counts >= threshold]
        dropped = self.frame["user_id"].nunique() - kept["user_id"].nunique()
        if dropped:
            logger.info(f"Dropped {dropped} users with fewer than {threshold} interactions")
        return InteractionLog(kept), int(dropped)

    @classmethod
    def read_csv(cls, path: PathLike) -> "InteractionLog":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"{path} does not exist")
        return cls(pd.read_csv(path))

    def to_csv(self, path: PathLike) -> None:
        columns = list(REQUIRED_COLUMNS) + [
            c for c in OPTIONAL_COLUMNS if c in self.frame.columns
        ]
        self.frame[columns].to_csv(path, index=False)


@dataclass
class SplitSpec:
    shift: str = "iid"
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    ood_fraction: float = 0.2
    mixed_weights: Tuple[float, float] = (0.8, 0.2)
    min_interactions: int = 20
    min_rating: Optional[float] = None
    groups: int = 5

    def __post_init__(self):
        if self.shift not in SHIFTS:
            raise ConfigError(f"shift must be one of {SHIFTS}, got {self.shift!r}")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.mixed_weights = tuple(float(w) for w in self.mixed_weights)
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError("train/valid/test ratios must be three numbers summing to 1")
        if len(self.mixed_weights) != 2 or abs(sum(self.mixed_weights) - 1.0) > 1e-9:
            raise ConfigError("mixed weights must be two numbers summing to 1")
        if not 0.0 < self.ood_fraction < 1.0:
            raise ConfigError("ood_fraction must lie in (0, 1)")
        if self.min_interactions < 1 or self.groups < 1:
            raise ConfigError("min_interactions and groups must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def popularity_groups(counts: pd.Series, groups: int = 5) -> pd.Series:
    """Equal interaction-mass popularity groups, 0 = head.

    Items are ordered by count (descending, ties by id) and an item lands in the
    group its cumulative preceding mass falls into.
    """
    if len(counts) < groups:
        raise ConfigError(f"{len(counts)} distinct items cannot fill {groups} groups")
    order = sorted(counts.index, key=lambda item: (-counts[item], item))
    ordered = counts.loc[order].to_numpy(dtype=float)
    before = np.concatenate([[0.0], np.cumsum(ordered)[:-1]])
    group = np.floor(groups * before / ordered.sum()).astype(int)
    return pd.Series(np.minimum(group, groups - 1), index=order).sort_index()


def _latest_per_user(frame: pd.DataFrame, fraction: float) -> pd.Index:
    picked = []
    for _, rows in frame.groupby("user_id", sort=True):
        rows = rows.sort_values("timestamp", kind="stable")
        n_latest = int(round(fraction * len(rows)))
        if n_latest:
            picked.append(rows.index[-n_latest:])
    return pd.Index(np.concatenate(picked)) if picked else pd.Index([], dtype=int)


def _balanced_by_group(
    frame: pd.DataFrame,
    item_group: pd.Series,
    size: int,
    groups: int,
    rng: np.random.Generator,
) -> pd.Index:
    quotas = np.full(groups, size // groups)
    quotas[: size % groups] += 1
    group_of_row = frame["item_id"].map(item_group).to_numpy()
    picked = []
    for group, quota in enumerate(quotas):
        members = frame.index[group_of_row == group].to_numpy()
        if len(members) < quota:
            logger.warning(
                f"Popularity group G{group + 1} has {len(members)} interactions, fewer "
                f"than its quota of {quota}"
            )
        take = min(quota, len(members))
        picked.append(np.sort(rng.choice(members, size=take, replace=False)))
    return pd.Index(np.concatenate(picked))


def _select_ood(
    frame: pd.DataFrame, spec: SplitSpec, rng: np.random.Generator
) -> pd.DataFrame:
    """OOD rows with an `origin` column; an empty frame for the iid shift."""
    n_ood = int(round(spec.ood_fraction * len(frame)))
    if spec.shift == "iid":
        return frame.iloc[0:0].assign(origin=pd.Series(dtype=str))
    if spec.shift in ("temporal", "exposure"):
        ood = frame.loc[_latest_per_user(frame, spec.ood_fraction)].copy()
        if spec.shift == "exposure":
            if "exposed_item_id" not in ood.columns:
                raise ConfigError("exposure shift needs an exposed_item_id column")
            ood["item_id"] = ood["exposed_item_id"]
        return ood.assign(origin=spec.shift)

    item_group = popularity_groups(frame["item_id"].value_counts(), spec.groups)
    if spec.shift == "popularity":
        picked = _balanced_by_group(frame, item_group, n_ood, spec.groups, rng)
        return frame.loc[picked].assign(origin="popularity")

    n_popularity = int(round(spec.mixed_weights[0] * n_ood))
    n_temporal = n_ood - n_popularity
    from_popularity = _balanced_by_group(frame, item_group, n_popularity, spec.groups, rng)
    temporal_pool = _latest_per_user(frame, spec.ood_fraction).difference(from_popularity)
    if len(temporal_pool) < n_temporal:
        raise ConfigError(
            f"temporal pool holds {len(temporal_pool)} interactions but the mixed shift "
            f"needs {n_temporal}"
        )
    from_temporal = np.sort(rng.choice(temporal_pool.to_numpy(), n_temporal, replace=False))
    return pd.concat(
        [
            frame.loc[from_popularity].assign(origin="popularity"),
            frame.loc[from_temporal].assign(origin="temporal"),
        ]
    )


def _split_per_user(
    frame: pd.DataFrame, ratios: Sequence[float], rng: np.random.Generator
) -> Tuple[pd.Index, pd.Index, pd.Index]:
    train, valid, test = [], [], []
    for _, rows in frame.groupby("user_id", sort=True):
        idx = rng.permutation(rows.index.to_numpy())
        n_train = int(np.floor(ratios[0] * len(idx) + 1e-9))
        n_valid = int(np.floor(ratios[1] * len(idx) + 1e-9))
        train.append(idx[:n_train])
        valid.append(idx[n_train : n_train + n_valid])
        test.append(idx[n_train + n_valid :])

    def joined(parts):
        return pd.Index(np.sort(np.concatenate(parts))) if parts else pd.Index([], dtype=int)

    return joined(train), joined(valid), joined(test)


@dataclass
class SplitResult:
    partitions: Dict[str, InteractionLog]
    dropped_users: int
    spec: SplitSpec
    seed: int

    def counts(self) -> Dict[str, int]:
        return {name: len(part) for name, part in self.partitions.items()}

    def manifest(self) -> Dict[str, Any]:
        ood = self.partitions["ood_test"].frame
        origins = ood["origin"].value_counts().sort_index() if len(ood) else pd.Series(dtype=int)
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "counts": self.counts(),
            "dropped_users": self.dropped_users,
            "ood_origin_counts": {str(k): int(v) for k, v in origins.items()},
        }


def split(log: InteractionLog, spec: SplitSpec, seed: int) -> SplitResult:
    frame = log.frame
    if spec.min_rating is not None:
        frame = frame[frame["rating"] >= spec.min_rating]
    filtered, dropped = InteractionLog(frame).filter_min_interactions(spec.min_interactions)
    frame = filtered.frame
    if frame.empty:
        raise InputError("no interactions survive filtering")
    rng = substream(seed, "split")

    ood = _select_ood(frame, spec, rng)
    remaining = frame.drop(index=ood.index)
    train, valid, test = _split_per_user(remaining, spec.ratios, rng)
    partitions = {
        "train": InteractionLog(remaining.loc[train]),
        "valid": InteractionLog(remaining.loc[valid]),
        "iid_test": InteractionLog(remaining.loc[test]),
        "ood_test": InteractionLog(ood),
    }
    result = SplitResult(partitions, dropped, spec, seed)
    logger.info(f"{spec.shift} split: {result.counts()}")
    return result


@dataclass(eq=False)
class RankedList:
    items: np.ndarray
    target: int

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=int)
        if len(np.unique(self.items)) != len(self.items):
            raise ConfigError("ranked list holds duplicate items")

    @property
    def rank(self) -> float:
        """1-based rank of the target, inf when absent."""
        hits = np.flatnonzero(self.items == self.target)
        return float(hits[0] + 1) if hits.size else float("inf")


def _ranks(lists: Sequence[RankedList], k: int) -> np.ndarray:
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if len(lists) == 0:
        raise EmptyBatchError("no ranked lists to score")
    return np.array([ranked.rank for ranked in lists])


def hr_at_k(lists: Sequence[RankedList], k: int) -> float:
    return float(np.mean(_ranks(lists, k) <= k))


def ndcg_at_k(lists: Sequence[RankedList], k: int) -> float:
    ranks = _ranks(lists, k)
    gains = np.zeros_like(ranks)
    hit = ranks <= k
    gains[hit] = 1.0 / np.log2(ranks[hit] + 1.0)
    return float(gains.mean())


METRICS: Dict[str, Callable[[Sequence[RankedList], int], float]] = {
    "hr": hr_at_k,
    "ndcg": ndcg_at_k,
}


def rank_from_scores(scores: np.ndarray, targets: Sequence[int]) -> List[RankedList]:
    """Descending score order, ties broken by item id."""
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind="stable")
    return [RankedList(order[i], int(t)) for i, t in enumerate(targets)]


def rank_items(
    policy: PolicyParams, env: np.ndarray, rest: np.ndarray, targets: Sequence[int]
) -> List[RankedList]:
    return rank_from_scores(log_probs(policy, env, rest), targets)


def backdoor_log_scores(
    policy: PolicyParams,
    rest: np.ndarray,
    env_centroids: np.ndarray,
    prior: np.ndarray,
) -> np.ndarray:
    """log sum_k p(k) pi(y | x with its env features replaced by centroid k)."""
    rest = np.atleast_2d(rest)
    per_env = [
        log_probs(policy, np.tile(centroid, (len(rest), 1)), rest)
        for centroid in np.atleast_2d(env_centroids)
    ]
    stacked = np.stack(per_env)  # (K, N, A)
    log_prior = np.log(np.asarray(prior, dtype=float))[:, None, None]
    return logsumexp(stacked + log_prior, axis=0)


def group_breakdown(
    lists: Sequence[RankedList],
    log: InteractionLog,
    metric: str,
    k: int,
    groups: int = 5,
) -> List[float]:
    """Metric per popularity group G1 (head) .. Gn (tail) of the target item."""
    scorer = METRICS[metric]
    item_group = popularity_groups(log.popularity(), groups)
    target_group = np.array([item_group.get(ranked.target, groups - 1) for ranked in lists])
    values = []
    for group in range(groups):
        members = [ranked for ranked, g in zip(lists, target_group) if g == group]
        values.append(scorer(members, k) if members else float("nan"))
    return values


def time_breakdown(
    lists: Sequence[RankedList],
    timestamps: Sequence[float],
    metric: str,
    k: int,
    buckets: int = 4,
) -> List[float]:
    """Metric per equal-count bucket of query timestamps, earliest first."""
    scorer = METRICS[metric]
    order = np.argsort(np.asarray(timestamps), kind="stable")
    values = []
    for chunk in np.array_split(order, buckets):
        values.append(scorer([lists[i] for i in chunk], k) if len(chunk) else float("nan"))
    return values


def _finite_or_none(values: Sequence[float]) -> List[Optional[float]]:
    return [None if np.isnan(v) else float(v) for v in values]


def metric_report(
    lists: Sequence[RankedList],
    popularity_log: InteractionLog,
    timestamps: Sequence[float],
    ks: Sequence[int] = (10, 20),
    groups: int = 5,
    buckets: int = 4,
) -> Dict[str, Any]:
    """HR/NDCG at every cutoff, globally, per popularity group and per time bucket.

    Empty groups or buckets are reported as None rather than zero.
    """
    if len(lists) == 0:
        raise EmptyBatchError("no ranked lists to evaluate")
    report: Dict[str, Any] = {"n_queries": len(lists), "groups": {}, "time_buckets": {}}
    for k in ks:
        for metric, scorer in METRICS.items():
            name = f"{metric}@{k}"
            report[name] = scorer(lists, k)
            report["groups"][name] = _finite_or_none(
                group_breakdown(lists, popularity_log, metric, k, groups)
            )
            report["time_buckets"][name] = _finite_or_none(
                time_breakdown(lists, timestamps, metric, k, buckets)
            )
    return report


def report_rows(report: Dict[str, Any]) -> pd.DataFrame:
    """Flat metric, k, slice, index, value table of a metric report for plotting."""
    rows = []
    for name, value in report.items():
        if "@" not in name:
            continue
        metric, k = name.split("@")
        rows.append((metric, int(k), "all", 0, value))
        for slice_name in ("groups", "time_buckets"):
            for index, sliced in enumerate(report[slice_name][name], start=1):
                rows.append((metric, int(k), slice_name, index, sliced))
    return pd.DataFrame(rows, columns=["metric", "k", "slice", "index", "value"])
