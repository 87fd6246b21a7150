"""Finite-difference checks of every primitive and of the training losses, plus
the closed-form gradient laws of the contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .contrastive import ContrastiveConfig, QueueBank, enqueue_batch, loss_from_sims, total_loss, \
    weighted_self_contrastive_loss
from .encoder import BatchFeatures, EncoderConfig, encode, init_params
from .tensor import Tensor

Case = tuple[str, Callable[[Tensor], Tensor], np.ndarray]


def primitive_cases(rng: np.random.Generator) -> list[Case]:
    """(name, f, x0) for every differentiable primitive; constants are drawn up front."""
    c34 = Tensor(rng.normal(size=(3, 4)))
    c234 = Tensor(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))
    g = Tensor(rng.normal(size=4) + 1.0)
    b = Tensor(rng.normal(size=4))
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    labels = [0, 3, 1]
    other = Tensor(rng.normal(size=(3, 4)))
    cases = [
        ("add", lambda x: T.sum(T.tanh(T.add(x, c34))), (3, 4)),
        ("sub", lambda x: T.sum(T.tanh(T.sub(c34, x))), (3, 4)),
        ("mul", lambda x: T.sum(T.mul(x, c34)), (3, 4)),
        ("mul_rows", lambda x: T.sum(T.tanh(T.mul(c234, x))), (4,)),
        ("scale", lambda x: T.sum(T.tanh(T.scale(x, -1.7))), (3, 4)),
        ("matmul", lambda x: T.sum(T.tanh(T.matmul(x, w))), (3, 4)),
        ("matmul_rhs", lambda x: T.sum(T.tanh(T.matmul(c234, x))), (4, 2)),
        ("bmm", lambda x: T.sum(T.tanh(T.bmm(x, T.transpose(c234)))), (2, 3, 4)),
        ("softmax", lambda x: T.sum(T.mul(T.softmax_rows(x), c34)), (3, 4)),
        ("cross_entropy", lambda x: T.cross_entropy_from_logits(x, labels), (3, 4)),
        ("mean_pool", lambda x: T.sum(T.tanh(T.masked_mean_pool(x, mask))), (2, 3, 4)),
        ("cosine", lambda x: T.sum(T.cosine_similarity(x, other)), (3, 4)),
        ("layer_norm", lambda x: T.sum(T.mul(T.layer_norm(x, g, b), c234)), (2, 3, 4)),
        ("layer_norm_gain", lambda x: T.sum(T.mul(T.layer_norm(c234, x, b), c234)), (4,)),
        ("tanh", lambda x: T.sum(T.mul(T.tanh(x), c34)), (3, 4)),
        ("gelu", lambda x: T.sum(T.mul(T.gelu(x), c34)), (3, 4)),
        ("exp_log", lambda x: T.sum(T.log(T.add(T.exp(x), Tensor(0.5)))), (3, 4)),
        ("take_rows", lambda x: T.sum(T.tanh(T.take_rows(x, ids))), (4, 4)),
        ("permute_reshape", lambda x: T.sum(T.tanh(T.reshape(T.permute(x, (1, 0, 2)), (3, 8)))), (2, 3, 4)),
        ("concat", lambda x: T.sum(T.tanh(T.concat([x, c34], axis=0))), (3, 4)),
    ]
    return [(name, f, rng.normal(size=shape)) for name, f, shape in cases]


def _unpack(x: Tensor, n: int, h: int, m: int) -> BatchFeatures:
    """Split a flat [n, 2h + 2m] tensor into the four feature blocks."""
    cols = np.arange(x.shape[1])
    pick = lambda lo, hi: T.transpose(T.take_rows(T.transpose(x), cols[lo:hi]))
    return BatchFeatures(pick(0, h), pick(h, 2 * h), pick(2 * h, 2 * h + m), pick(2 * h + m, 2 * h + 2 * m))


def loss_cases(rng: np.random.Generator, cfg: ContrastiveConfig | None = None, n: int = 4, h: int = 6,
               m: int = 3) -> list[Case]:
    """The contrastive loss and the combined objective on a random batch, differentiated
    w.r.t. the features, and the combined objective through a tiny encoder."""
    cfg = cfg or ContrastiveConfig()
    coarse = rng.integers(0, m, size=n)
    coarse[:2] = [0, 1]
    bank = QueueBank(m, 4, h)
    enqueue_batch(bank, rng.normal(size=(6, h)), rng.integers(0, m, size=6))

    def contrastive(x):
        return weighted_self_contrastive_loss(_unpack(x, n, h, m), coarse, bank, cfg)

    def combined(x):
        return total_loss(_unpack(x, n, h, m), coarse, bank, cfg)[0]

    enc = EncoderConfig(vocab_size=12, max_seq_len=5, num_layers=3, tap_layer=1, hidden_dim=h, num_heads=2,
                        ffn_dim=8, dropout_p=0.0, num_coarse_classes=m)
    params = init_params(enc, int(rng.integers(1 << 30)))
    tokens = rng.integers(2, 12, size=(n, 5))
    mask = np.ones((n, 5), dtype=np.int64)
    mask[0, 3:] = 0

    def through_encoder(name):
        def f(x):
            saved = params.tensors[name]
            params.tensors[name] = x
            try:
                return total_loss(encode(params, tokens, mask), coarse, bank, cfg)[0]
            finally:
                params.tensors[name] = saved
        return f

    x0 = rng.normal(size=(n, 2 * h + 2 * m))
    return [
        ("contrastive_loss", contrastive, x0),
        ("total_loss", combined, x0.copy()),
        ("encoder_total_loss[layer0.wq]", through_encoder("layer0.wq"), params["layer0.wq"].data.copy()),
        ("encoder_total_loss[tok_emb]", through_encoder("tok_emb"), params["tok_emb"].data.copy()),
    ]


def positive_gradient(tau: float, rng: np.random.Generator, n: int = 3, k: int = 5) -> np.ndarray:
    """Autodiff gradient of the contrastive loss w.r.t. each query's positive similarity."""
    cfg = ContrastiveConfig(tau=tau)
    pos = Tensor(rng.uniform(-1, 1, size=n), requires_grad=True)
    neg = Tensor(rng.uniform(-1, 1, size=(n, k)))
    weights = rng.choice([cfg.alpha_same, cfg.alpha_diff, cfg.alpha_m], size=(n, k))
    with T.Tape() as tape:
        loss = loss_from_sims(pos, neg, weights, cfg)
    T.backward(loss, tape)
    return pos.grad


def group_gradient_ratios(cfg: ContrastiveConfig, sim: float = 0.3) -> dict[str, float]:
    """With every negative at the same similarity, d loss / d s_k over groups is proportional to alpha."""
    w = cfg.weights()
    groups = ["same", "diff", "momentum"]
    neg = Tensor(np.full((1, 3), sim), requires_grad=True)
    with T.Tape() as tape:
        loss = loss_from_sims(Tensor(np.array([0.9])), neg, np.array([[w[g] for g in groups]]), cfg)
    T.backward(loss, tape)
    g = dict(zip(groups, neg.grad[0]))
    return {
        "diff/same": g["diff"] / g["same"], "alpha_diff/alpha_same": w["diff"] / w["same"],
        "momentum/same": g["momentum"] / g["same"], "alpha_m/alpha_same": w["momentum"] / w["same"],
    }


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float


def run_gradcheck(seeds=range(3), tolerance: float = 1e-4, cfg: ContrastiveConfig | None = None) -> list[CheckResult]:
    cfg = cfg or ContrastiveConfig()
    results: dict[str, CheckResult] = {}

    def record(name, err, ok):
        prev = results.get(name)
        if prev is None or err > prev.max_error:
            results[name] = CheckResult(name, ok and (prev is None or prev.passed), err)
        elif not ok:
            prev.passed = False

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, x0 in primitive_cases(rng) + loss_cases(rng, cfg):
            rep = T.grad_check(f, x0, tolerance=tolerance)
            record(name, rep.max_rel_err, rep.passed)
        g = positive_gradient(cfg.tau, rng)
        err = float(np.abs(g + 1.0 / cfg.tau).max())
        record("d_loss/d_sim_pos == -1/tau", err, err <= 1e-6)
    r = group_gradient_ratios(cfg)
    err = float(max(abs(r["diff/same"] - r["alpha_diff/alpha_same"]),
                    abs(r["momentum/same"] - r["alpha_m/alpha_same"])))
    record("group gradient ratio == alpha ratio", err, err <= 1e-9)
    return list(results.values())
