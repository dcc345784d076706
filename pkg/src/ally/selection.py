"""Query-batch construction: k-means diversity plus per-cluster top-dual
selection, with random and greedy k-center (coreset) baselines.

All strategies are pure functions of their inputs and seed. Ties are broken
by the lowest index everywhere so replays are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

STRATEGIES = ("ally", "random", "coreset", "top_dual")


@dataclass
class ClusterAssignment:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float


@dataclass
class QueryBatch:
    """Positions into the unlabeled set, in selection order."""

    indices: np.ndarray
    strategy: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("query batch contains duplicate indices")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances."""
    p2 = (points**2).sum(axis=1)[:, None]
    c2 = (centers**2).sum(axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centers.T
    return np.maximum(d2, 0.0)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centers[j : j + 1])[:, 0])
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    rng_seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeding, deterministic given the seed.

    Empty clusters are re-seeded at the point currently farthest from its
    assigned centroid. The returned assignment is recomputed against the
    final centroids so every sample maps to its nearest one.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError("points must be 2-D")
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(rng_seed)
    centers = _kmeans_pp_seed(points, k, rng)
    for _ in range(max_iters):
        d2 = _squared_distances(points, centers)
        assignment = d2.argmin(axis=1)
        nearest = d2[np.arange(n), assignment]
        new_centers = centers.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                far = int(nearest.argmax())
                new_centers[j] = points[far]
                nearest[far] = 0.0
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = _squared_distances(points, centers)
    assignment = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    return ClusterAssignment(centers, assignment, inertia)


def _top_by_dual(candidates: np.ndarray, duals: np.ndarray, count: int) -> np.ndarray:
    """Highest-dual candidates, ties to the lowest index, in pick order."""
    order = np.lexsort((candidates, -duals[candidates]))
    return candidates[order[:count]]


def ally_select(
    embeddings_unlabeled: np.ndarray,
    predicted_duals: np.ndarray,
    b: int,
    k: int,
    rng_seed: int,
) -> QueryBatch:
    """Cluster the unlabeled embeddings and take each cluster's top duals.

    Each cluster contributes its floor(b/k) highest-dual members (repeated
    argmax-and-remove); the b mod k remainder is filled with the globally
    highest-dual samples not yet selected, so the full budget is spent.
    """
    embeddings = np.asarray(embeddings_unlabeled, dtype=np.float64)
    duals = np.asarray(predicted_duals, dtype=np.float64).reshape(-1)
    n = len(embeddings)
    if len(duals) != n:
        raise ShapeError("one predicted dual per unlabeled embedding is required")
    if b > n:
        raise ValueError(f"budget {b} exceeds unlabeled pool size {n}")
    if not 1 <= k <= b:
        raise ValueError(f"cluster count must lie in [1, {b}], got {k}")

    clusters = kmeans(embeddings, k, rng_seed)
    per_cluster = b // k
    chosen: list[np.ndarray] = []
    taken = np.zeros(n, dtype=bool)
    for j in range(k):
        members = np.flatnonzero(clusters.assignment == j)
        picks = _top_by_dual(members, duals, per_cluster)
        chosen.append(picks)
        taken[picks] = True
    remainder = b - int(taken.sum())
    if remainder > 0:
        rest = np.flatnonzero(~taken)
        fill = _top_by_dual(rest, duals, remainder)
        chosen.append(fill)
    return QueryBatch(np.concatenate(chosen), "ally")


def top_dual_select(predicted_duals: np.ndarray, b: int) -> QueryBatch:
    """The b globally highest-dual samples, no diversity."""
    duals = np.asarray(predicted_duals, dtype=np.float64).reshape(-1)
    if b > len(duals):
        raise ValueError(f"budget {b} exceeds unlabeled pool size {len(duals)}")
    picks = _top_by_dual(np.arange(len(duals)), duals, b)
    return QueryBatch(picks, "top_dual")


def random_select(n_unlabeled: int, b: int, rng_seed: int) -> QueryBatch:
    """Uniform sample without replacement."""
    if b > n_unlabeled:
        raise ValueError(f"budget {b} exceeds unlabeled pool size {n_unlabeled}")
    rng = np.random.default_rng(rng_seed)
    return QueryBatch(rng.choice(n_unlabeled, size=b, replace=False), "random")


def coreset_select(
    embeddings_labeled: np.ndarray, embeddings_unlabeled: np.ndarray, b: int
) -> QueryBatch:
    """Greedy k-center: repeatedly add the point farthest from all centers.

    Centers are the labeled embeddings plus the picks so far. With no
    labeled points the first pick falls to the lowest index.
    """
    unlabeled = np.asarray(embeddings_unlabeled, dtype=np.float64)
    labeled = np.asarray(embeddings_labeled, dtype=np.float64)
    n = len(unlabeled)
    if b > n:
        raise ValueError(f"budget {b} exceeds unlabeled pool size {n}")
    if labeled.size > 0:
        min_d = np.sqrt(_squared_distances(unlabeled, labeled)).min(axis=1)
    else:
        min_d = np.full(n, np.inf)
    picks = np.empty(b, dtype=np.int64)
    for i in range(b):
        j = int(min_d.argmax())
        picks[i] = j
        d = np.sqrt(_squared_distances(unlabeled, unlabeled[j : j + 1])[:, 0])
        min_d = np.minimum(min_d, d)
        min_d[j] = -1.0  # never reselect
    return QueryBatch(picks, "coreset")


def covering_radius(
    embeddings_labeled: np.ndarray,
    embeddings_unlabeled: np.ndarray,
    selected: np.ndarray,
) -> float:
    """Max distance from any unlabeled point to its nearest center."""
    unlabeled = np.asarray(embeddings_unlabeled, dtype=np.float64)
    centers = [np.asarray(embeddings_labeled, dtype=np.float64)]
    if len(selected):
        centers.append(unlabeled[np.asarray(selected, dtype=np.int64)])
    centers = np.concatenate([c for c in centers if c.size > 0], axis=0)
    if centers.size == 0:
        return float("inf")
    return float(np.sqrt(_squared_distances(unlabeled, centers)).min(axis=1).max())
