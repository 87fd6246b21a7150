"""External clustering metrics: Hungarian-aligned accuracy, ARI and NMI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ContingencyTable:
    counts: np.ndarray  # [K_pred, K_true]

    @property
    def rows(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def cols(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def contingency(pred, truth) -> ContingencyTable:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max(initial=-1) + 1, t.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return ContingencyTable(table)


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of rows to columns.

    Shortest augmenting paths with dual potentials, O(n^3). Rectangular input
    is zero-padded to square; returns ``assignment[r] = c`` for each original
    row (``-1`` if the row was matched to padding) and the total cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost must be a non-empty 2-d matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost contains non-finite values")
    r, c = cost.shape
    n = max(r, c)
    a = np.zeros((n, n))
    a[:r, :c] = cost

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # column j -> row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1

    assignment = np.full(r, -1, dtype=np.int64)
    for j in range(1, n + 1):
        row = match_col[j] - 1
        if row < r and j - 1 < c:
            assignment[row] = j - 1
    total = float(sum(cost[i, assignment[i]] for i in range(r) if assignment[i] >= 0))
    return assignment, total


def clustering_accuracy(pred, truth) -> float:
    table = contingency(pred, truth)
    if table.n < 1:
        raise ValueError("need at least one sample")
    assignment, _ = hungarian(-table.counts)
    matched = sum(table.counts[i, j] for i, j in enumerate(assignment) if j >= 0)
    return matched / table.n


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(pred, truth) -> float:
    table = contingency(pred, truth)
    n = table.n
    if n < 2:
        raise ValueError("ARI needs at least two samples")
    index = _comb2(table.counts).sum()
    a = _comb2(table.rows).sum()
    b = _comb2(table.cols).sum()
    expected = a * b / _comb2(n)
    max_index = (a + b) / 2
    if max_index == expected:
        # both partitions trivial (all-in-one or all-singletons) and identical in shape
        return 1.0
    return float((index - expected) / (max_index - expected))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def normalized_mutual_info(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    table = contingency(pred, truth)
    n = table.n
    if n < 1:
        raise ValueError("need at least one sample")
    hp = _entropy(table.rows, n)
    ht = _entropy(table.cols, n)
    if hp == 0 and ht == 0:
        return 1.0
    nz = table.counts > 0
    pij = table.counts[nz] / n
    outer = np.outer(table.rows, table.cols)[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    denom = (hp + ht) / 2
    return float(min(max(mi / denom, 0.0), 1.0))
