import numpy as np
import pytest

from fcdc import tensor as T
from fcdc.contrastive import ContrastiveConfig, QueueBank, enqueue_batch, total_loss
from fcdc.encoder import (EncoderConfig, coarse_logits, encode, expected_param_count, init_params,
                          load_checkpoint, momentum_update, param_shapes, save_checkpoint, token_states)
from fcdc.tensor import Tensor

SMALL = EncoderConfig(vocab_size=30, max_seq_len=8, num_layers=3, tap_layer=1, hidden_dim=8, num_heads=2,
                      ffn_dim=16, num_coarse_classes=3)


def batch(rng, n=4, t=6, vocab=30):
    tokens = rng.integers(2, vocab, size=(n, t))
    lengths = rng.integers(1, t + 1, size=n)
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int64)
    return np.where(mask == 1, tokens, 0), mask


def test_parameter_count_hand_computed():
    cfg = EncoderConfig(vocab_size=100, max_seq_len=16, num_layers=4, tap_layer=2, hidden_dim=32,
                        num_heads=4, ffn_dim=64, num_coarse_classes=4)
    # embeddings 3712, per layer 8544 (x4), two heads 264
    assert expected_param_count(cfg) == 38152
    assert init_params(cfg, 0).count() == 38152
    assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == 38152


@pytest.mark.parametrize("bad", [dict(tap_layer=0), dict(tap_layer=4), dict(hidden_dim=10, num_heads=4),
                                 dict(dropout_p=1.0)])
def test_config_validation(bad):
    base = dict(vocab_size=10, max_seq_len=4, num_layers=3)
    with pytest.raises(ValueError):
        EncoderConfig(**{**base, **bad})


def test_init_is_deterministic_and_ln_gains_are_one():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    for name, p in a:
        assert np.array_equal(p.data, b[name].data)
    assert np.all(a["layer0.ln1.g"].data == 1.0) and np.all(a["layer0.bq"].data == 0.0)
    assert not np.array_equal(a["tok_emb"].data, init_params(SMALL, 4)["tok_emb"].data)


def test_shapes_and_eval_determinism():
    params = init_params(SMALL, 0)
    tokens, mask = batch(np.random.default_rng(0))
    f1 = encode(params, tokens, mask)
    f2 = encode(params, tokens, mask)
    assert f1.shallow.shape == f1.deep.shape == (4, 8)
    assert f1.tap_logits.shape == f1.out_logits.shape == (4, 3)
    assert np.array_equal(f1.deep.data, f2.deep.data)
    assert np.all(np.abs(f1.out_logits.data) < 1.0)


def test_train_mode_dropout_seeded():
    params = init_params(SMALL, 0)
    tokens, mask = batch(np.random.default_rng(0))
    a = encode(params, tokens, mask, mode="train", seed=1, step=5)
    b = encode(params, tokens, mask, mode="train", seed=1, step=5)
    c = encode(params, tokens, mask, mode="train", seed=1, step=6)
    assert np.array_equal(a.deep.data, b.deep.data)
    assert not np.array_equal(a.deep.data, c.deep.data)


def test_padding_does_not_change_features():
    params = init_params(SMALL, 1)
    tokens, mask = batch(np.random.default_rng(2))
    padded_t = np.concatenate([tokens, np.zeros((4, 2), dtype=np.int64)], axis=1)
    padded_m = np.concatenate([mask, np.zeros((4, 2), dtype=np.int64)], axis=1)
    a, b = encode(params, tokens, mask), encode(params, padded_t, padded_m)
    # positions differ only where masked, so pooled features agree
    assert np.allclose(a.deep.data, b.deep.data, atol=1e-12)


def test_rows_are_independent():
    params = init_params(SMALL, 1)
    tokens, mask = batch(np.random.default_rng(5))
    full = encode(params, tokens, mask).deep.data
    perm = np.array([2, 0, 3, 1])
    permuted = encode(params, tokens[perm], mask[perm]).deep.data
    assert np.allclose(full[perm], permuted, atol=1e-12)


def test_tap_feature_is_pooled_tap_layer_state():
    params = init_params(SMALL, 2)
    tokens, mask = batch(np.random.default_rng(1))
    states = token_states(params, tokens, mask, upto=SMALL.tap_layer)
    m = mask[:, :, None]
    pooled = (states[-1].data * m).sum(axis=1) / m.sum(axis=1)
    assert np.allclose(encode(params, tokens, mask).shallow.data, pooled, atol=1e-12)


def test_input_validation():
    params = init_params(SMALL, 0)
    tokens, mask = batch(np.random.default_rng(0))
    with pytest.raises(ValueError):
        encode(params, tokens, mask[:, :-1])
    with pytest.raises(ValueError):
        encode(params, np.full((1, 9), 2), np.ones((1, 9)))
    with pytest.raises(ValueError):
        encode(params, np.full((1, 3), 30), np.ones((1, 3)))
    with pytest.raises(ValueError):
        encode(params, tokens, np.zeros_like(mask))
    with pytest.raises(ValueError):
        encode(params, tokens, mask, mode="infer")


def test_coarse_logits_example():
    w = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    b = Tensor(np.array([0.0, -1.0]))
    out = coarse_logits(w, b, Tensor(np.array([[0.5, 0.5]])))
    assert np.allclose(out.data, np.tanh([[0.5, 0.0]]))
    with pytest.raises(ValueError):
        coarse_logits(w, b, Tensor(np.ones((1, 3))))


def test_momentum_update_is_geometric():
    params = init_params(SMALL, 0)
    mom = init_params(SMALL, 1).clone(requires_grad=False)
    gap0 = mom["tok_emb"].data - params["tok_emb"].data
    for _ in range(5):
        momentum_update(params, mom, 0.9)
    assert np.allclose(mom["tok_emb"].data - params["tok_emb"].data, 0.9**5 * gap0, atol=1e-12)
    frozen = mom["tok_emb"].data.copy()
    momentum_update(params, mom, 1.0)
    assert np.array_equal(mom["tok_emb"].data, frozen)
    momentum_update(params, mom, 0.0)
    assert np.array_equal(mom["tok_emb"].data, params["tok_emb"].data)
    with pytest.raises(ValueError):
        momentum_update(params, mom, 1.5)


def test_full_objective_reaches_every_parameter_and_not_the_twin():
    cfg = ContrastiveConfig()
    params = init_params(SMALL, 0)
    mom = params.clone(requires_grad=False)
    bank = QueueBank(3, 8, SMALL.hidden_dim)
    rng = np.random.default_rng(0)
    reached = set()
    for step in range(10):
        tokens, mask = batch(rng)
        coarse = rng.integers(0, 3, size=4)
        params.zero_grad()
        with T.Tape() as tape:
            feats = encode(params, tokens, mask, mode="train", seed=0, step=step)
            loss, _ = total_loss(feats, coarse, bank, cfg)
        T.backward(loss, tape)
        reached |= {k for k, g in params.grads().items() if g is not None and np.any(g != 0)}
        enqueue_batch(bank, encode(mom, tokens, mask).deep, coarse)
    assert reached == set(param_shapes(SMALL))
    assert all(t.grad is None for _, t in mom)


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL, 0)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, params, {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"} and loaded.config == SMALL
    for name, p in params:
        assert np.array_equal(p.data, loaded[name].data)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    params = init_params(SMALL, 0)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, params)
    with np.load(path) as z:
        arrays = dict(z)
    arrays["param/tok_emb"] = np.zeros((3, 3))
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="tok_emb"):
        load_checkpoint(path)
