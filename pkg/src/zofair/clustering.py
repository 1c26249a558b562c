"""k-means over the training data and round-robin seed sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAX_ITER = 300


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,)


def _sq_dists(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def _plusplus_init(data, k, rng):
    n = len(data)
    centroids = [data[rng.integers(n)]]
    d2 = ((data - centroids[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            # only duplicates of chosen centres remain
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centroids.append(data[i])
        d2 = np.minimum(d2, ((data - data[i]) ** 2).sum(1))
    return np.array(centroids, dtype=np.float64)


def kmeans(data, k: int, rng_seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding; deterministic for a given seed."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("cannot cluster an empty dataset")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = len(np.unique(data, axis=0))
    if k > distinct:
        logger.warning("k=%d exceeds %d distinct points; using k=%d", k, distinct, distinct)
        k = distinct
    rng = np.random.default_rng(rng_seed)
    centroids = _plusplus_init(data, k, rng)
    assign = None
    for _ in range(MAX_ITER):
        d2 = _sq_dists(data, centroids)
        new_assign = d2.argmin(1)
        for c in range(k):
            if not np.any(new_assign == c):
                # reseed from the point farthest from its current centre
                far = int(d2[np.arange(len(data)), new_assign].argmax())
                new_assign[far] = c
                d2[far, :] = 0.0
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        centroids = np.array([data[assign == c].mean(0) if np.any(assign == c) else centroids[c]
                              for c in range(k)])
    return ClusterModel(k, centroids, assign)


def round_robin_seeds(clusters: ClusterModel, data, count: int) -> np.ndarray:
    """Cycle clusters 0..k-1, taking members of each in dataset order.

    Below the dataset size each cluster wraps on its own. From the dataset size
    up, exhausted clusters are skipped until every row has been emitted once,
    after which all clusters wrap.
    """
    data = np.asarray(data)
    members = [np.flatnonzero(clusters.assignments == c) for c in range(clusters.k)]
    members = [m for m in members if m.size]
    pos = [0] * len(members)
    cover = count >= len(data)
    remaining = len(data)
    order = []
    c = 0
    while len(order) < count:
        m = members[c]
        if cover and remaining > 0 and pos[c] >= m.size:
            c = (c + 1) % len(members)
            continue
        order.append(m[pos[c] % m.size])
        pos[c] += 1
        if pos[c] <= m.size:
            remaining -= 1
        c = (c + 1) % len(members)
    return data[np.array(order, dtype=np.int64)] if order else data[:0]
