"""Lloyd's K-Means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    seed: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkh,nkh->nk", diff, diff)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[idx]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a centre; pick any unused index
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def _repair_empty(X, assign, d2, k):
    """Give each empty cluster the point currently farthest from its centroid."""
    counts = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(counts == 0):
        cost = d2[np.arange(len(X)), assign].copy()
        # never strip a cluster of its last member
        cost[counts[assign] <= 1] = -1.0
        j = int(np.argmax(cost))
        counts[assign[j]] -= 1
        assign[j] = c
        counts[c] = 1
    return assign


def kmeans_fit(X, k: int, seed: int = 0, max_iters: int = 300, rel_tol: float = 1e-6,
               normalize: bool = False) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    if k <= 0:
        raise ValueError("K must be positive")
    if k > len(X):
        raise ValueError(f"K={k} exceeds number of points {len(X)}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if normalize:
        X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(X, k, rng)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, centroids)
        new_assign = _repair_empty(X, d2.argmin(axis=1), d2, k)
        if assign is not None and np.array_equal(new_assign, assign):
            it -= 1
            break
        assign = new_assign
        centroids = np.stack([X[assign == c].mean(axis=0) for c in range(k)])
        inertia = float(_sq_dists(X, centroids)[np.arange(len(X)), assign].sum())
        history.append(inertia)
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - inertia) / prev < rel_tol:
                break
    return KMeansResult(centroids, assign, history[-1], max(it, 1), seed, history)


def kmeans_best_of(X, k: int, n_restarts: int = 10, base_seed: int = 0, **kw) -> KMeansResult:
    if n_restarts < 1:
        raise ValueError("n_restarts must be at least 1")
    runs = [kmeans_fit(X, k, seed=base_seed + r, **kw) for r in range(n_restarts)]
    return min(runs, key=lambda r: (r.inertia, r.seed))
