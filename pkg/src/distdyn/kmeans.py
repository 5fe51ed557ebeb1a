"""Lloyd's k-means with k-means++ seeding, best of several restarts."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .core import InputError


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Run Lloyd iterations from ``centers``; returns (centers, labels, sse)."""
    centers = centers.copy()
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        dist = cdist(x, centers, "sqeuclidean")
        new_labels = np.argmin(dist, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # Re-seed an empty cluster at the point farthest from its centroid.
            far = int(np.argmax(dist[np.arange(x.shape[0]), new_labels]))
            centers[j] = x[far]
            dist = cdist(x, centers, "sqeuclidean")
            new_labels = np.argmin(dist, axis=1)
            counts = np.bincount(new_labels, minlength=k)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if members.size:
                centers[j] = members.mean(axis=0)
    dist = cdist(x, centers, "sqeuclidean")
    labels = np.argmin(dist, axis=1)
    sse = float(dist[np.arange(x.shape[0]), labels].sum())
    return centers, labels, sse


def kmeans(x, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300):
    """Best-of-``restarts`` k-means by within-cluster SSE.

    Returns ``(centers, labels)``. Deterministic given ``seed``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1 or restarts < 1:
        raise InputError("k and restarts must be >= 1")
    if k > x.shape[0]:
        raise InputError(f"K={k} exceeds the pooled sample size {x.shape[0]}")
    if k == 1:
        return x.mean(axis=0, keepdims=True), np.zeros(x.shape[0], dtype=int)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, labels, sse = lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or sse < best[2]:
            best = (centers, labels, sse)
    return best[0], best[1]
