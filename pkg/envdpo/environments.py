"""
Latent-environment discovery on a batch of hidden representations.

Representations are projected by a linear extractor, hard-clustered with DBSCAN,
and every sample then gets a softmax membership over the cluster centers.
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import networkx as nx
import numpy as np
from loguru import logger
from scipy.spatial.distance import cdist, pdist
from scipy.special import softmax

from envdpo.constants import NOISE
from envdpo.errors import (
    ConfigError,
    DimensionError,
    NoClusterError,
    NormalizationError,
    ZeroMassError,
)
from envdpo.utils import substream

ROW_TOLERANCE = 1e-9
EXTRACTOR_NOISE = 0.01


@dataclass(eq=False)
class ExtractorParams:
    W_g: np.ndarray
    b_g: np.ndarray

    def __post_init__(self):
        self.W_g = np.atleast_2d(np.asarray(self.W_g, dtype=float))
        self.b_g = np.atleast_1d(np.asarray(self.b_g, dtype=float))
        out_dim, in_dim = self.W_g.shape
        if out_dim < 1 or out_dim > in_dim:
            raise ConfigError(
                f"extractor output dim must be in [1, {in_dim}], got {out_dim}"
            )
        if self.b_g.shape != (out_dim,):
            raise DimensionError(f"b_g must have {out_dim} entries")

    @property
    def in_dim(self) -> int:
        return self.W_g.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W_g.shape[0]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.W_g.ravel(), self.b_g])

    def from_vector(self, theta: np.ndarray) -> "ExtractorParams":
        theta = np.asarray(theta, dtype=float)
        n_w = self.W_g.size
        return ExtractorParams(
            theta[:n_w].reshape(self.W_g.shape).copy(), theta[n_w:].copy()
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"W_g": self.W_g.tolist(), "b_g": self.b_g.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtractorParams":
        return cls(np.array(data["W_g"], dtype=float), np.array(data["b_g"], dtype=float))


def init_extractor(in_dim: int, out_dim: int, seed: int) -> ExtractorParams:
    """Leading-coordinate projection plus a little seeded noise."""
    out_dim = min(out_dim, in_dim)
    rng = substream(seed, "extractor")
    W_g = np.eye(out_dim, in_dim) + EXTRACTOR_NOISE * rng.standard_normal(
        (out_dim, in_dim)
    )
    return ExtractorParams(W_g, np.zeros(out_dim))


def extract_batch(g: ExtractorParams, h: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if h.shape[1] != g.in_dim:
        raise DimensionError(f"expected {g.in_dim}-dim representations, got {h.shape[1]}")
    return h @ g.W_g.T + g.b_g


def extract(g: ExtractorParams, h: np.ndarray) -> np.ndarray:
    return extract_batch(g, h)[0]


def extractor_backward(
    g: ExtractorParams, h: np.ndarray, grad_z: np.ndarray
) -> Tuple[ExtractorParams, np.ndarray]:
    """Gradients w.r.t. (W_g, b_g) and w.r.t. the representations h."""
    h = np.atleast_2d(h)
    grad = ExtractorParams(grad_z.T @ h, grad_z.sum(axis=0))
    return grad, grad_z @ g.W_g


@dataclass
class DbscanConfig:
    eps: float
    min_pts: int

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if int(self.min_pts) < 1:
            raise ConfigError(f"min_pts must be at least 1, got {self.min_pts}")
        self.min_pts = int(self.min_pts)

    @classmethod
    def auto(cls, points: np.ndarray) -> "DbscanConfig":
        """Half the median pairwise distance, and min_pts = max(4, B / 20)."""
        points = np.atleast_2d(points)
        dists = pdist(points) if len(points) > 1 else np.zeros(0)
        eps = 0.5 * float(np.median(dists)) if dists.size else 0.0
        if not eps > 0:
            nonzero = dists[dists > 0]
            eps = 0.5 * float(np.median(nonzero)) if nonzero.size else 1.0
        return cls(eps=eps, min_pts=max(4, len(points) // 20))


def dbscan(points: np.ndarray, cfg: DbscanConfig) -> np.ndarray:
    """DBSCAN labels in scan order; noise is -1.

    Core points within eps of each other form a graph whose connected
    components are the clusters, numbered by their lowest core index. A border
    point joins the lowest-numbered cluster that reaches it, which is what a
    sequential scan over the input order produces.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_points = len(points)
    within = cdist(points, points) <= cfg.eps
    core = within.sum(axis=1) >= cfg.min_pts
    core_idx = np.flatnonzero(core)

    graph = nx.Graph()
    graph.add_nodes_from(core_idx.tolist())
    core_links = within[np.ix_(core_idx, core_idx)]
    rows, cols = np.nonzero(np.triu(core_links, k=1))
    graph.add_edges_from(zip(core_idx[rows].tolist(), core_idx[cols].tolist()))

    # sort clusters to guarantee determinism
    components = sorted(nx.connected_components(graph), key=min)
    labels = np.full(n_points, NOISE, dtype=int)
    for label, component in enumerate(components):
        labels[sorted(component)] = label

    for i in np.flatnonzero(~core):
        reachable = labels[core_idx[within[i, core_idx]]]
        if reachable.size:
            labels[i] = reachable.min()
    return labels


def cluster_count(labels: np.ndarray) -> int:
    labels = np.asarray(labels)
    return int(labels.max()) + 1 if np.any(labels != NOISE) else 0


def centers(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels)
    n_clusters = cluster_count(labels)
    if n_clusters == 0:
        raise NoClusterError("every point is DBSCAN noise")
    return np.vstack([points[labels == k].mean(axis=0) for k in range(n_clusters)])


@dataclass(eq=False)
class SoftAssignment:
    probs: np.ndarray
    centers: np.ndarray
    noise_mask: np.ndarray
    discovered: int = -1
    scale: float = 1.0

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        if self.discovered < 0:
            self.discovered = self.k

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    @property
    def degenerate(self) -> bool:
        return self.k <= 1

    def check_rows(self, tol: float = ROW_TOLERANCE) -> None:
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise NormalizationError("soft assignment entries must lie in [0, 1]")
        worst = float(np.abs(self.probs.sum(axis=1) - 1.0).max())
        if worst > tol:
            raise NormalizationError(
                f"soft assignment rows deviate from 1 by up to {worst:.3g}"
            )

    def to_record(self, batch_index: int) -> Dict[str, Any]:
        return {
            "batch": batch_index,
            "discovered": self.discovered,
            "probs": self.probs.tolist(),
            "centers": np.atleast_2d(self.centers).tolist(),
            "noise_mask": self.noise_mask.astype(bool).tolist(),
        }


def soft_assign(
    points: np.ndarray,
    cluster_centers: np.ndarray,
    scale: float = 1.0,
    noise_mask: Optional[np.ndarray] = None,
) -> SoftAssignment:
    """p_ik = softmax_k(-scale * ||z_i - c_k||)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cluster_centers = np.atleast_2d(np.asarray(cluster_centers, dtype=float))
    if len(cluster_centers) < 1:
        raise NoClusterError("soft assignment needs at least one center")
    distances = cdist(points, cluster_centers)
    probs = softmax(-scale * distances, axis=1)
    if noise_mask is None:
        noise_mask = np.zeros(len(points), dtype=bool)
    return SoftAssignment(
        probs=probs,
        centers=cluster_centers,
        noise_mask=np.asarray(noise_mask, dtype=bool),
        scale=scale,
    )


def discover(
    points: np.ndarray, cfg: Optional[DbscanConfig] = None, scale: float = 1.0
) -> Tuple[SoftAssignment, np.ndarray]:
    """DBSCAN, centers and soft assignment for one batch.

    When every point is noise the batch is treated as a single environment.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if cfg is None:
        cfg = DbscanConfig.auto(points)
    labels = dbscan(points, cfg)
    noise_mask = labels == NOISE
    n_clusters = cluster_count(labels)
    logger.debug(
        f"DBSCAN(eps={cfg.eps:.4g}, min_pts={cfg.min_pts}) found {n_clusters} "
        f"clusters and {int(noise_mask.sum())} noise points"
    )
    if n_clusters == 0:
        assignment = SoftAssignment(
            probs=np.ones((len(points), 1)),
            centers=points.mean(axis=0, keepdims=True),
            noise_mask=noise_mask,
            discovered=0,
            scale=scale,
        )
        return assignment, labels
    assignment = soft_assign(points, centers(points, labels), scale, noise_mask)
    assignment.discovered = n_clusters
    return assignment, labels


def soft_assign_backward(
    points: np.ndarray, assignment: SoftAssignment, grad_probs: np.ndarray
) -> np.ndarray:
    """Gradient w.r.t. the points of <grad_probs, probs>, centers held fixed."""
    points = np.atleast_2d(points)
    p = assignment.probs
    if assignment.k <= 1:
        return np.zeros_like(points)
    grad_logits = p * (grad_probs - (grad_probs * p).sum(axis=1, keepdims=True))
    grad_dist = -assignment.scale * grad_logits
    diff = points[:, None, :] - assignment.centers[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    return np.einsum("ik,ikd->id", grad_dist, unit)


def aggregate_all(batch_vectors: np.ndarray, assignment: SoftAssignment) -> np.ndarray:
    """x_bar^(k) = sum_i p_ik x_i / sum_i p_ik for every k, shape (K, d)."""
    vectors = np.atleast_2d(np.asarray(batch_vectors, dtype=float))
    mass = assignment.probs.sum(axis=0)
    if np.any(mass <= 0):
        raise ZeroMassError("an environment has zero total membership")
    return (assignment.probs.T @ vectors) / mass[:, None]


def aggregate(batch_vectors: np.ndarray, assignment: SoftAssignment, k: int) -> np.ndarray:
    if not 0 <= k < assignment.k:
        raise ConfigError(f"cluster index {k} outside [0, {assignment.k})")
    weights = assignment.probs[:, k]
    if not weights.sum() > 0:
        raise ZeroMassError(f"environment {k} has zero total membership")
    vectors = np.atleast_2d(np.asarray(batch_vectors, dtype=float))
    return weights @ vectors / weights.sum()


@dataclass(eq=False)
class EnvPrior:
    p_hat: np.ndarray

    def __post_init__(self):
        self.p_hat = np.atleast_1d(np.asarray(self.p_hat, dtype=float))
        if np.any(self.p_hat < 0) or abs(self.p_hat.sum() - 1.0) > ROW_TOLERANCE:
            raise NormalizationError("environment prior must be a probability vector")

    def __len__(self) -> int:
        return len(self.p_hat)


def env_prior(assignment: SoftAssignment) -> EnvPrior:
    """Mini-batch Monte Carlo prior: the column mean of the memberships."""
    return EnvPrior(assignment.probs.mean(axis=0))
