"""K-means cluster sampling and SMOTE oversampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, TooFewSamples


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    centroids: np.ndarray
    membership: np.ndarray
    inertia: float
    history: tuple[float, ...]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.k)


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[int(rng.integers(len(x)))]]
    closest = _sq_dist(x, centroids[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        pick = int(rng.choice(len(x), p=closest / total))
        centroids.append(x[pick])
        closest = np.minimum(closest, _sq_dist(x, x[pick][None, :])[:, 0])
    return np.array(centroids)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm from a seeded k-means++ start.

    ``history`` holds the within-cluster sum of squares after every assignment
    step; it never increases. An emptied cluster is re-seeded with the point
    farthest from its current centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DegenerateInput("kmeans needs a non-empty 2-D point array")
    if k < 1:
        raise DegenerateInput("k must be positive")
    if len(np.unique(x, axis=0)) < k:
        raise DegenerateInput(f"fewer than {k} distinct points")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dist(x, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        point_cost = d[np.arange(len(x)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(point_cost.argmax())
                centroids[j] = x[far]
                labels[far] = j
                point_cost[far] = 0.0
    d = _sq_dist(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return ClusterAssignment(k, centroids, labels, inertia, tuple(history))


def cluster_sample(
    points: np.ndarray,
    k: int,
    fraction: float,
    seed: int = 0,
    labels: np.ndarray | None = None,
    max_iters: int = 100,
) -> np.ndarray:
    """Indices of a representative subsample.

    Clusters each class separately when ``labels`` is given (k shrinks to the
    class's distinct-point count if needed), then draws ceil(fraction * size)
    members uniformly from every cluster.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    x = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if labels is None:
        groups = [np.arange(len(x))]
    else:
        labels = np.asarray(labels)
        groups = [np.flatnonzero(labels == c) for c in sorted(set(labels.tolist()))]
    picked = []
    for group in groups:
        sub = x[group]
        kc = min(k, len(np.unique(sub, axis=0)))
        assignment = kmeans(sub, kc, seed=int(rng.integers(1 << 31)), max_iters=max_iters)
        for j in range(kc):
            members = group[assignment.membership == j]
            if len(members) == 0:
                continue
            take = math.ceil(fraction * len(members))
            picked.append(rng.choice(members, size=take, replace=False))
    return np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class SmoteConfig:
    target_count: int
    k_neighbors: int = 5
    seed: int = 0


class SyntheticBatch(NamedTuple):
    points: np.ndarray
    seed_index: np.ndarray
    neighbor_index: np.ndarray


def smote(minority: np.ndarray, config: SmoteConfig) -> SyntheticBatch:
    """Interpolate ``target_count - len(minority)`` new points toward random k-nearest neighbours."""
    x = np.asarray(minority, dtype=np.float64)
    n = len(x)
    if n <= config.k_neighbors:
        raise TooFewSamples(f"SMOTE needs more than {config.k_neighbors} samples, got {n}")
    if config.target_count < n:
        raise ValueError(f"target count {config.target_count} is below the current count {n}")
    need = config.target_count - n
    if need == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SyntheticBatch(np.zeros((0, x.shape[1])), empty, empty)
    k = config.k_neighbors
    _, nbrs = cKDTree(x).query(x, k=k + 1)
    is_self = nbrs == np.arange(n)[:, None]
    no_self = ~is_self.any(axis=1)
    is_self[no_self, -1] = True
    nbrs = nbrs[~is_self].reshape(n, k)

    rng = np.random.default_rng(config.seed)
    seeds = rng.integers(0, n, size=need)
    chosen = nbrs[seeds, rng.integers(0, k, size=need)]
    gap = rng.random(need)[:, None]
    pts = x[seeds] + gap * (x[chosen] - x[seeds])
    return SyntheticBatch(pts, seeds, chosen)


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 50
    fraction: float = 0.05
    k_neighbors: int = 5
    target_count: int | None = None
    seed: int = 0


def sample_and_balance(
    features: np.ndarray, labels: np.ndarray, config: SamplingConfig
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Cluster-sample every class, then equalize class counts.

    Classes above the target are thinned uniformly, classes below it are
    topped up with SMOTE. The target defaults to the largest sampled class.
    Returns the balanced features, labels and a before/after count summary.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(config.seed)
    idx = cluster_sample(x, config.k, config.fraction, seed=int(rng.integers(1 << 31)), labels=labels)
    xs, ys = x[idx], labels[idx]
    classes = sorted(set(ys.tolist()))
    counts = {c: int((ys == c).sum()) for c in classes}
    target = config.target_count or max(counts.values())
    out_x, out_y = [], []
    for c in classes:
        cx = xs[ys == c]
        if len(cx) > target:
            cx = cx[np.sort(rng.choice(len(cx), size=target, replace=False))]
        elif len(cx) < target:
            kn = min(config.k_neighbors, len(cx) - 1)
            if kn < 1:
                raise TooFewSamples(f"class {c!r} has {len(cx)} sample(s); SMOTE needs at least 2")
            synth = smote(cx, SmoteConfig(target, kn, int(rng.integers(1 << 31)))).points
            cx = np.concatenate([cx, synth])
        out_x.append(cx)
        out_y.append(np.full(len(cx), c, dtype=object))
    summary = {
        "original": {c: int((labels == c).sum()) for c in sorted(set(labels.tolist()))},
        "sampled": counts,
        "balanced": {c: target for c in classes},
    }
    return np.concatenate(out_x), np.concatenate(out_y), summary
