"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0


@dataclass
class OptState:
    config: OptimConfig = field(default_factory=OptimConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_state(params: dict[str, np.ndarray], config: OptimConfig) -> OptState:
    return OptState(
        config=config,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState) -> dict[str, np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("params, grads and optimizer state do not match structurally")
    cfg = state.config
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"{k}: shape mismatch between parameter, gradient and state")
        m = state.m[k] = cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g * g
        p = p - cfg.lr * cfg.weight_decay * p
        out[k] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return out
