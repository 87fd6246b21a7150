"""Pre-norm transformer encoder with a shallow tap layer and a momentum twin."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_seq_len: int
    num_layers: int = 4
    tap_layer: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    dropout_p: float = 0.1
    num_coarse_classes: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be at least 2")
        if not 1 <= self.tap_layer < self.num_layers:
            raise ValueError(f"tap_layer must be in [1, {self.num_layers}), got {self.tap_layer}")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.vocab_size < 2 or self.max_seq_len < 1 or self.num_coarse_classes < 1:
            raise ValueError("vocab_size, max_seq_len and num_coarse_classes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f, m = cfg.hidden_dim, cfg.ffn_dim, cfg.num_coarse_classes
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, h),
        "pos_emb": (cfg.max_seq_len, h),
    }
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (h,), p + "ln1.b": (h,),
            p + "wq": (h, h), p + "bq": (h,),
            p + "wk": (h, h), p + "bk": (h,),
            p + "wv": (h, h), p + "bv": (h,),
            p + "wo": (h, h), p + "bo": (h,),
            p + "ln2.g": (h,), p + "ln2.b": (h,),
            p + "w1": (h, f), p + "b1": (f,),
            p + "w2": (f, h), p + "b2": (h,),
        })
    shapes.update({
        "tap_head.w": (h, m), "tap_head.b": (m,),
        "out_head.w": (h, m), "out_head.b": (m,),
    })
    return shapes


class EncoderParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match config")
        for k, t in tensors.items():
            if t.shape != expected[k]:
                raise ValueError(f"{k}: shape {t.shape} != expected {expected[k]}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def clone(self, requires_grad: bool | None = None) -> "EncoderParams":
        out = {}
        for k, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(t.data.copy(), requires_grad=rg, name=k)
        return EncoderParams(self.config, out)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    The momentum twin is obtained with ``params.clone(requires_grad=False)``.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return EncoderParams(config, tensors)


def expected_param_count(config: EncoderConfig) -> int:
    h, f, m = config.hidden_dim, config.ffn_dim, config.num_coarse_classes
    per_layer = 4 * h + 4 * (h * h + h) + (h * f + f) + (f * h + h)
    return (config.vocab_size + config.max_seq_len) * h + config.num_layers * per_layer + 2 * (h * m + m)


@dataclass
class BatchFeatures:
    shallow: Tensor  # H^L [N, h]
    deep: Tensor  # H^o [N, h]
    tap_logits: Tensor  # Z^L [N, M]
    out_logits: Tensor  # Z^o [N, M]

    def __post_init__(self):
        n = self.shallow.shape[0]
        if not all(t.shape[0] == n for t in (self.deep, self.tap_logits, self.out_logits)):
            raise ValueError("feature row counts differ")

    @property
    def n(self) -> int:
        return self.shallow.shape[0]


def coarse_logits(w: Tensor, b: Tensor, features: Tensor) -> Tensor:
    """tanh(h W + b)."""
    if features.shape[-1] != w.shape[0]:
        raise ValueError(f"feature width {features.shape[-1]} != head input {w.shape[0]}")
    return T.tanh(T.add(T.matmul(features, w), b))


def _block(params: EncoderParams, i: int, x: Tensor, key_mask: np.ndarray, drop) -> Tensor:
    cfg = params.config
    n, t, h = x.shape
    nh = cfg.num_heads
    d = h // nh
    p = f"layer{i}."

    y = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])

    def heads(w, b):
        z = T.add(T.matmul(y, params[p + w]), params[p + b])
        return T.permute(T.reshape(z, (n, t, nh, d)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    scores = T.scale(T.bmm(q, T.transpose(k)), 1.0 / np.sqrt(d))
    att = T.softmax_rows(scores, key_mask)
    ctx = T.reshape(T.permute(T.bmm(att, v), (0, 2, 1, 3)), (n, t, h))
    o = T.add(T.matmul(ctx, params[p + "wo"]), params[p + "bo"])
    x = T.add(x, drop(o, 2 * i + 1))

    y = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    f = T.gelu(T.add(T.matmul(y, params[p + "w1"]), params[p + "b1"]))
    f = T.add(T.matmul(f, params[p + "w2"]), params[p + "b2"])
    return T.add(x, drop(f, 2 * i + 2))


def _check_inputs(cfg: EncoderConfig, tokens: np.ndarray, mask: np.ndarray) -> None:
    if tokens.ndim != 2 or mask.shape != tokens.shape:
        raise ValueError(f"tokens {tokens.shape} and mask {mask.shape} must be matching [N, T]")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("empty document: mask row with no tokens")


def token_states(params: EncoderParams, tokens, mask, mode: str = "eval", seed: int = 0,
                 step: int = 0, upto: int | None = None) -> list[Tensor]:
    """Residual-stream states after each of the first ``upto`` blocks."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask)
    _check_inputs(cfg, tokens, mask)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"

    def drop(x, site):
        return T.dropout(x, cfg.dropout_p, seed, step, site, training)

    n, t = tokens.shape
    positions = np.broadcast_to(np.arange(t), (n, t))
    x = T.add(T.take_rows(params["tok_emb"], tokens), T.take_rows(params["pos_emb"], positions))
    x = drop(x, 0)
    key_mask = mask.astype(bool)[:, None, None, :]
    states = []
    for i in range(cfg.num_layers if upto is None else upto):
        x = _block(params, i, x, key_mask, drop)
        states.append(x)
    return states


def encode(params: EncoderParams, tokens, mask, mode: str = "eval", seed: int = 0, step: int = 0) -> BatchFeatures:
    cfg = params.config
    states = token_states(params, tokens, mask, mode, seed, step)
    mask = np.asarray(mask)
    shallow = T.masked_mean_pool(states[cfg.tap_layer - 1], mask)
    deep = T.masked_mean_pool(states[-1], mask)
    return BatchFeatures(
        shallow=shallow,
        deep=deep,
        tap_logits=coarse_logits(params["tap_head.w"], params["tap_head.b"], shallow),
        out_logits=coarse_logits(params["out_head.w"], params["out_head.b"], deep),
    )


def momentum_update(params: EncoderParams, momentum_params: EncoderParams, m: float) -> EncoderParams:
    """In-place EMA: theta_m <- m * theta_m + (1 - m) * theta."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if list(params.tensors) != list(momentum_params.tensors):
        raise ValueError("parameter sets are not structurally identical")
    for name, p in params:
        tm = momentum_params[name]
        if tm.shape != p.shape:
            raise ValueError(f"{name}: shape {tm.shape} != {p.shape}")
        tm.data = m * tm.data + (1.0 - m) * p.data
        tm.grad = None
    return momentum_params


def save_checkpoint(path, params: EncoderParams, extra: dict | None = None) -> None:
    header = {"encoder": asdict(params.config), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        cfg = EncoderConfig(**header["encoder"])
        shapes = param_shapes(cfg)
        tensors = {}
        for name, shape in shapes.items():
            key = f"param/{name}"
            if key not in z:
                raise ValueError(f"checkpoint {path} is missing parameter {name}")
            arr = z[key]
            if arr.shape != shape:
                raise ValueError(f"checkpoint {path}: {name} has shape {arr.shape}, config expects {shape}")
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return EncoderParams(cfg, tensors), header["extra"]
