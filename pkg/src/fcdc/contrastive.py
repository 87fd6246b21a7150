"""Weighted self-contrastive loss, class-conditional momentum queues, and the
combined training objective."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import BatchFeatures
from .tensor import Tensor


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    alpha_same: float = 1.0
    alpha_diff: float = 1.4
    alpha_m: float = 1.0
    gamma1: float = 0.001
    gamma2: float = 0.008
    momentum: float = 0.9
    queue_capacity: int = 128
    use_momentum: bool = True
    use_weighting: bool = True
    use_self_contrast: bool = True
    use_shallow_ce: bool = True
    add_positive_to_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.alpha_same, self.alpha_diff, self.alpha_m) < 0:
            raise ValueError("weighting factors must be non-negative")
        if self.queue_capacity < 0:
            raise ValueError("queue_capacity must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")

    def weights(self) -> dict[str, float]:
        if not self.use_weighting:
            return {"same": 1.0, "diff": 1.0, "momentum": 1.0}
        return {"same": self.alpha_same, "diff": self.alpha_diff, "momentum": self.alpha_m}


class QueueBank:
    """One bounded FIFO of momentum features per coarse class."""

    def __init__(self, num_classes: int, capacity: int, dim: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self.queues = [deque(maxlen=capacity) for _ in range(num_classes)]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def fill_levels(self) -> list[int]:
        return [len(q) for q in self.queues]

    def contents(self, c: int) -> np.ndarray:
        q = self.queues[c]
        return np.array(q).reshape(len(q), self.dim)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """All entries stacked, with their class ids."""
        feats = [self.contents(c) for c in range(self.num_classes)]
        labels = [np.full(len(f), c) for c, f in enumerate(feats)]
        return np.concatenate(feats, axis=0), np.concatenate(labels).astype(np.int64)


def enqueue_batch(bank: QueueBank, momentum_deep, coarse) -> QueueBank:
    feats = np.asarray(momentum_deep.data if isinstance(momentum_deep, Tensor) else momentum_deep)
    coarse = np.asarray(coarse, dtype=np.int64)
    if len(coarse) and (coarse.min() < 0 or coarse.max() >= bank.num_classes):
        raise ValueError(f"coarse label out of range [0, {bank.num_classes})")
    for f, c in zip(feats, coarse):
        bank.queues[c].append(np.array(f, copy=True))
    return bank


@dataclass
class NegativeGroups:
    """Negative keys of one query. In-batch keys are (kind, index) pairs."""

    diff: list[tuple[str, int]] = field(default_factory=list)
    same: list[tuple[str, int]] = field(default_factory=list)
    momentum: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def assemble_negatives(i: int, features: BatchFeatures, coarse, bank: QueueBank | None) -> NegativeGroups:
    coarse = np.asarray(coarse)
    n = features.n
    if not 0 <= i < n:
        raise ValueError(f"query index {i} out of range for batch of {n}")
    groups = NegativeGroups()
    for j in range(n):
        if j == i:
            continue
        target = groups.same if coarse[j] == coarse[i] else groups.diff
        target.extend([("shallow", j), ("deep", j)])
    if bank is not None:
        groups.momentum = bank.contents(int(coarse[i]))
    else:
        groups.momentum = np.zeros((0, features.deep.shape[1]))
    return groups


def _pair_weights(coarse: np.ndarray, w: dict[str, float]) -> np.ndarray:
    """[N, 2N] weights against (shallow keys | deep keys); zero for the query itself."""
    same = coarse[:, None] == coarse[None, :]
    half = np.where(same, w["same"], w["diff"])
    np.fill_diagonal(half, 0.0)
    return np.concatenate([half, half], axis=1)


def loss_from_sims(pos: Tensor, neg: Tensor, weights: np.ndarray, cfg: ContrastiveConfig) -> Tensor:
    """sum_i [ -pos_i/tau + log sum_k w_ik exp(neg_ik/tau) ] over [N] positives and [N, K] negatives.

    A zero weight removes a key; each row needs at least one positive weight
    unless the positive is also placed in the denominator.
    """
    weights = np.asarray(weights, dtype=neg.dtype)
    if weights.shape != neg.shape:
        raise ValueError(f"weights {weights.shape} do not match similarities {neg.shape}")
    if not cfg.add_positive_to_denominator and (weights.sum(axis=1) <= 0).any():
        raise ValueError("a query has no negative keys (batch of one with empty queue, or all weights zero)")
    denom = T.sum(T.mul(T.exp(T.scale(neg, 1.0 / cfg.tau)), Tensor(weights)), axis=-1)
    if cfg.add_positive_to_denominator:
        denom = T.add(denom, T.exp(T.scale(pos, 1.0 / cfg.tau)))
    return T.sum(T.sub(T.log(denom), T.scale(pos, 1.0 / cfg.tau)))


def weighted_self_contrastive_loss(features: BatchFeatures, coarse, bank: QueueBank | None,
                                   cfg: ContrastiveConfig, positive: Tensor | None = None) -> Tensor:
    """Self-contrastive loss of a batch: each deep feature is pulled to its own
    shallow feature and pushed from weighted negatives.

    ``positive`` overrides the shallow feature as the positive key; queue
    entries enter as constants.
    """
    coarse = np.asarray(coarse, dtype=np.int64)
    w = cfg.weights()
    dtype = features.deep.dtype

    q = T.l2_normalize(features.deep)
    s = T.l2_normalize(features.shallow)
    pos_key = s if positive is None else T.l2_normalize(positive)
    pos = T.sum(T.mul(q, pos_key), axis=-1)

    sims = T.matmul(q, T.transpose(T.concat([s, q], axis=0)))
    weights = _pair_weights(coarse, w)

    if bank is not None and cfg.use_momentum and len(bank):
        qfeat, qlab = bank.snapshot()
        qnorm = np.linalg.norm(qfeat, axis=1, keepdims=True)
        if (qnorm == 0).any():
            raise ValueError("zero-norm vector in queue")
        qkeys = Tensor((qfeat / qnorm).T.astype(dtype))
        sims = T.concat([sims, T.matmul(q, qkeys)], axis=1)
        qw = np.where(coarse[:, None] == qlab[None, :], w["momentum"], 0.0)
        weights = np.concatenate([weights, qw], axis=1)

    return loss_from_sims(pos, sims, weights, cfg)


def contrastive_gradient_wrt_sims(pos_sim: float, neg_sims: dict[str, np.ndarray], cfg: ContrastiveConfig) -> dict:
    """Closed-form partial derivatives of one query's loss w.r.t. its similarities.

    The positive always gets -1/tau (plus the softmax term when the positive is
    also in the denominator); a negative in group l gets alpha_l * P_ij with
    P_ij = exp(s_j / tau) / (tau * denominator).
    """
    w = cfg.weights()
    tau = cfg.tau
    sims = {g: np.asarray(v, dtype=np.float64) for g, v in neg_sims.items()}
    denom = sum(float(w[g] * np.exp(v / tau).sum()) for g, v in sims.items())
    if cfg.add_positive_to_denominator:
        denom += np.exp(pos_sim / tau)
    if denom <= 0:
        raise ValueError("no negative keys")
    out = {g: w[g] * np.exp(v / tau) / (tau * denom) for g, v in sims.items()}
    d_pos = -1.0 / tau
    if cfg.add_positive_to_denominator:
        d_pos += np.exp(pos_sim / tau) / (tau * denom)
    out["positive"] = d_pos
    return out


def total_loss(features: BatchFeatures, coarse, bank: QueueBank | None, cfg: ContrastiveConfig,
               positive: Tensor | None = None) -> tuple[Tensor, dict[str, float]]:
    """Output-layer CE + gamma1 * tap-layer CE + gamma2 * contrastive loss."""
    coarse = np.asarray(coarse, dtype=np.int64)
    sup_out = T.cross_entropy_from_logits(features.out_logits, coarse)
    terms = [sup_out]
    breakdown = {"sup_out": sup_out.item(), "sup_tap": 0.0, "cont": 0.0}
    g1 = cfg.gamma1 if cfg.use_shallow_ce else 0.0
    if g1:
        sup_tap = T.cross_entropy_from_logits(features.tap_logits, coarse)
        breakdown["sup_tap"] = sup_tap.item()
        terms.append(T.scale(sup_tap, g1))
    if cfg.gamma2:
        if not cfg.use_self_contrast and positive is None:
            raise ValueError("self-contrast is disabled: pass an alternative positive key")
        cont = weighted_self_contrastive_loss(
            features, coarse, bank if cfg.use_momentum else None, cfg,
            positive=None if cfg.use_self_contrast else positive,
        )
        breakdown["cont"] = cont.item()
        terms.append(T.scale(cont, cfg.gamma2))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    breakdown["total"] = total.item()
    return total, breakdown


def distance_diagnostics(deep, coarse, fine) -> dict[str, float | None]:
    """Mean cosine distance within coarse classes across fine classes, and across coarse classes."""
    x = np.asarray(deep.data if isinstance(deep, Tensor) else deep, dtype=np.float64)
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm feature vector")
    u = x / norms
    dist = 1.0 - u @ u.T
    iu = np.triu_indices(len(x), k=1)
    d = dist[iu]
    same_c = (coarse[:, None] == coarse[None, :])[iu]
    same_f = (fine[:, None] == fine[None, :])[iu]
    fine_pairs = same_c & ~same_f
    coarse_pairs = ~same_c
    return {
        "d_fine": float(d[fine_pairs].mean()) if fine_pairs.any() else None,
        "d_coarse": float(d[coarse_pairs].mean()) if coarse_pairs.any() else None,
    }
