import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcdc import tensor as T
from fcdc.contrastive import (ContrastiveConfig, QueueBank, assemble_negatives, contrastive_gradient_wrt_sims,
                              distance_diagnostics, enqueue_batch, loss_from_sims, total_loss,
                              weighted_self_contrastive_loss)
from fcdc.encoder import BatchFeatures
from fcdc.tensor import Tensor


def scalar_query_loss(pos, groups, weights, tau, add_pos=False):
    """-pos/tau + log sum_l alpha_l sum_k exp(s_k/tau), written out term by term."""
    denom = sum(weights[g] * math.exp(s / tau) for g, sims in groups.items() for s in sims)
    if add_pos:
        denom += math.exp(pos / tau)
    return -pos / tau + math.log(denom)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def reference_batch_loss(shallow, deep, coarse, queue, cfg, positive=None):
    """Loop over queries with explicit cosine similarities and group membership."""
    w = cfg.weights()
    total = 0.0
    for i in range(len(deep)):
        groups = {"same": [], "diff": [], "momentum": []}
        for j in range(len(deep)):
            if j == i:
                continue
            g = "same" if coarse[j] == coarse[i] else "diff"
            groups[g] += [cos(deep[i], shallow[j]), cos(deep[i], deep[j])]
        for feat, lab in queue:
            if lab == coarse[i]:
                groups["momentum"].append(cos(deep[i], feat))
        key = shallow[i] if positive is None else positive[i]
        total += scalar_query_loss(cos(deep[i], key), groups, w, cfg.tau, cfg.add_positive_to_denominator)
    return total


def random_features(rng, n, h, m=3):
    return BatchFeatures(
        shallow=Tensor(rng.normal(size=(n, h)), requires_grad=True),
        deep=Tensor(rng.normal(size=(n, h)), requires_grad=True),
        tap_logits=Tensor(rng.normal(size=(n, m)), requires_grad=True),
        out_logits=Tensor(rng.normal(size=(n, m)), requires_grad=True),
    )


def test_worked_example_loss_and_gradients():
    cfg = ContrastiveConfig()
    groups = {"same": [0.5], "diff": [0.2]}
    loss = scalar_query_loss(0.8, groups, cfg.weights(), cfg.tau)
    # -8 + ln(e^5 + 1.4 e^2)
    assert loss == pytest.approx(-2.93262, abs=1e-5)
    assert loss == pytest.approx(-8 + math.log(math.exp(5) + 1.4 * math.exp(2)), abs=1e-12)
    g = contrastive_gradient_wrt_sims(0.8, {"same": np.array([0.5]), "diff": np.array([0.2])}, cfg)
    assert g["positive"] == pytest.approx(-10.0, abs=1e-12)
    assert g["same"][0] == pytest.approx(9.348, abs=1e-3)
    assert g["diff"][0] == pytest.approx(0.6516, abs=1e-3)


def test_doubling_every_weight_adds_log_two():
    base = ContrastiveConfig(alpha_same=1.0, alpha_diff=1.4, alpha_m=0.7)
    doubled = ContrastiveConfig(alpha_same=2.0, alpha_diff=2.8, alpha_m=1.4)
    groups = {"same": [0.1, -0.3], "diff": [0.4], "momentum": [0.0, 0.9]}
    a = scalar_query_loss(0.6, groups, base.weights(), base.tau)
    b = scalar_query_loss(0.6, groups, doubled.weights(), doubled.tau)
    assert b - a == pytest.approx(math.log(2), abs=1e-12)


def test_weighting_off_uses_unit_weights():
    assert ContrastiveConfig(use_weighting=False).weights() == {"same": 1.0, "diff": 1.0, "momentum": 1.0}


@pytest.mark.parametrize("bad", [dict(tau=0.0), dict(alpha_diff=-1.0), dict(momentum=1.5), dict(queue_capacity=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ContrastiveConfig(**bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(0, 6), st.booleans())
def test_vectorized_loss_matches_per_query_reference(seed, n, qlen, add_pos):
    rng = np.random.default_rng(seed)
    h, m = 5, 3
    cfg = ContrastiveConfig(alpha_diff=float(rng.uniform(0.5, 2)), alpha_m=float(rng.uniform(0.5, 2)),
                            tau=float(rng.uniform(0.05, 1)), add_positive_to_denominator=add_pos)
    feats = random_features(rng, n, h, m)
    coarse = rng.integers(0, m, size=n)
    bank = QueueBank(m, 4, h)
    queue = [(rng.normal(size=h), int(rng.integers(0, m))) for _ in range(qlen)]
    for f, c in queue:
        enqueue_batch(bank, f[None], [c])
    kept = [(f, c) for c in range(m) for f in bank.contents(c)]
    got = weighted_self_contrastive_loss(feats, coarse, bank, cfg).item()
    want = reference_batch_loss(feats.shallow.data, feats.deep.data, coarse, kept, cfg)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-10)


def test_alternative_positive_is_used():
    rng = np.random.default_rng(1)
    cfg = ContrastiveConfig()
    feats = random_features(rng, 4, 6)
    coarse = np.array([0, 0, 1, 2])
    alt = Tensor(rng.normal(size=(4, 6)))
    got = weighted_self_contrastive_loss(feats, coarse, None, cfg, positive=alt).item()
    want = reference_batch_loss(feats.shallow.data, feats.deep.data, coarse, [], cfg, positive=alt.data)
    assert got == pytest.approx(want, rel=1e-12)


def test_batch_of_one_without_queue_is_an_error():
    feats = random_features(np.random.default_rng(0), 1, 4)
    with pytest.raises(ValueError, match="no negative"):
        weighted_self_contrastive_loss(feats, [0], None, ContrastiveConfig())
    bank = QueueBank(2, 3, 4)
    enqueue_batch(bank, np.ones((1, 4)), [0])
    assert math.isfinite(weighted_self_contrastive_loss(feats, [0], bank, ContrastiveConfig()).item())


def test_queue_contributes_no_gradient_and_is_unchanged():
    rng = np.random.default_rng(3)
    feats = random_features(rng, 4, 5)
    bank = QueueBank(2, 4, 5)
    enqueue_batch(bank, rng.normal(size=(6, 5)), [0, 1, 0, 1, 0, 0])
    before = bank.snapshot()[0].copy()
    with T.Tape() as tape:
        loss = weighted_self_contrastive_loss(feats, [0, 1, 1, 0], bank, ContrastiveConfig())
    T.backward(loss, tape)
    assert np.array_equal(before, bank.snapshot()[0])
    assert feats.deep.grad is not None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_autodiff_gradient_laws_on_similarities(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 5)), int(rng.integers(1, 9))
    cfg = ContrastiveConfig(tau=float(rng.uniform(0.05, 1.0)))
    pos = Tensor(rng.uniform(-1, 1, size=n), requires_grad=True)
    neg = Tensor(rng.uniform(-1, 1, size=(n, k)), requires_grad=True)
    weights = rng.choice([cfg.alpha_same, cfg.alpha_diff, cfg.alpha_m], size=(n, k))
    with T.Tape() as tape:
        loss = loss_from_sims(pos, neg, weights, cfg)
    T.backward(loss, tape)
    assert np.allclose(pos.grad, -1.0 / cfg.tau, atol=1e-6)
    e = weights * np.exp(neg.data / cfg.tau)
    p = np.exp(neg.data / cfg.tau) / (cfg.tau * e.sum(axis=1, keepdims=True))
    assert np.allclose(neg.grad, weights * p, rtol=1e-6, atol=1e-12)


def test_closed_form_gradient_matches_finite_differences():
    cfg = ContrastiveConfig(add_positive_to_denominator=True)
    sims = {"same": [0.3, -0.2], "diff": [0.6], "momentum": [0.1]}
    g = contrastive_gradient_wrt_sims(0.7, {k: np.array(v) for k, v in sims.items()}, cfg)
    h = 1e-6
    f = lambda p, s: scalar_query_loss(p, s, cfg.weights(), cfg.tau, add_pos=True)
    assert g["positive"] == pytest.approx((f(0.7 + h, sims) - f(0.7 - h, sims)) / (2 * h), rel=1e-6)
    for grp, vals in sims.items():
        for j in range(len(vals)):
            up = {k: list(v) for k, v in sims.items()}
            dn = {k: list(v) for k, v in sims.items()}
            up[grp][j] += h
            dn[grp][j] -= h
            assert g[grp][j] == pytest.approx((f(0.7, up) - f(0.7, dn)) / (2 * h), rel=1e-6)


def test_assemble_negatives_groups():
    feats = random_features(np.random.default_rng(0), 4, 3)
    bank = QueueBank(2, 5, 3)
    enqueue_batch(bank, np.arange(9.0).reshape(3, 3), [1, 0, 1])
    g = assemble_negatives(0, feats, [1, 1, 0, 1], bank)
    assert g.same == [("shallow", 1), ("deep", 1), ("shallow", 3), ("deep", 3)]
    assert g.diff == [("shallow", 2), ("deep", 2)]
    assert np.array_equal(g.momentum, [[0, 1, 2], [6, 7, 8]])
    assert assemble_negatives(2, feats, [1, 1, 0, 1], None).momentum.shape == (0, 3)
    with pytest.raises(ValueError):
        assemble_negatives(4, feats, [1, 1, 0, 1], bank)


def test_queue_fifo_and_validation():
    bank = QueueBank(2, 3, 2)
    for i in range(5):
        enqueue_batch(bank, np.full((1, 2), float(i)), [0])
    assert bank.fill_levels() == [3, 0]
    assert bank.contents(0)[:, 0].tolist() == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        enqueue_batch(bank, np.zeros((1, 2)), [2])
    with pytest.raises(ValueError):
        QueueBank(2, -1, 2)


def test_queue_stores_copies():
    bank = QueueBank(1, 2, 2)
    x = np.zeros((1, 2))
    enqueue_batch(bank, x, [0])
    x[0, 0] = 5.0
    assert bank.contents(0)[0, 0] == 0.0


def test_total_loss_composition_and_ablations():
    rng = np.random.default_rng(4)
    feats = random_features(rng, 5, 4, 3)
    coarse = np.array([0, 1, 2, 0, 1])
    cfg = ContrastiveConfig()
    loss, parts = total_loss(feats, coarse, None, cfg)
    want = parts["sup_out"] + cfg.gamma1 * parts["sup_tap"] + cfg.gamma2 * parts["cont"]
    assert loss.item() == pytest.approx(want, rel=1e-12)
    assert parts["total"] == loss.item()

    _, off = total_loss(feats, coarse, None, ContrastiveConfig(gamma2=0.0, use_shallow_ce=False))
    assert off["total"] == pytest.approx(off["sup_out"]) and off["cont"] == 0.0

    with pytest.raises(ValueError):
        total_loss(feats, coarse, None, ContrastiveConfig(use_self_contrast=False))


def test_distance_diagnostics():
    deep = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    d = distance_diagnostics(deep, [0, 0, 0, 1], [0, 1, 1, 2])
    # fine pairs (different fine, same coarse): (0,1)->0, (0,2)->1
    assert d["d_fine"] == pytest.approx(0.5)
    # coarse pairs: (0,3)->2, (1,3)->2, (2,3)->1
    assert d["d_coarse"] == pytest.approx(5 / 3)
    assert distance_diagnostics(deep[:2], [0, 0], [0, 0]) == {"d_fine": None, "d_coarse": None}
    with pytest.raises(ValueError):
        distance_diagnostics(np.zeros((2, 2)), [0, 1], [0, 1])
