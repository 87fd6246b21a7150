"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its forward value with numpy and, when a :class:`Tape` is
active and some input requires a gradient, appends a record to the tape.
Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so a rule can
be swapped out (tests use this for fault injection).

Broadcasting is deliberately narrow: an operand may match exactly, be a
scalar, or be a vector matching the last axis of the other operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


@dataclass
class Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: dict[str, Any]


@dataclass
class Tape:
    """Ordered log of executed ops; use as a context manager to record."""

    records: list[Record] = field(default_factory=list)
    stochastic: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    t = Tensor(out)
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.is_leaf = False
        tape.records.append(Record(op, t, tuple(inputs), ctx))
    return t


BACKWARD_RULES: dict[str, Callable[[Record, np.ndarray], tuple]] = {}


def rule(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "exact"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_rows"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_rows"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...], kind_side: str) -> np.ndarray:
    if kind_side == "scalar":
        return np.asarray(g.sum()).reshape(shape)
    if kind_side == "rows":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


def _sides(kind: str) -> tuple[str, str]:
    return {
        "exact": ("full", "full"),
        "b_scalar": ("full", "scalar"),
        "a_scalar": ("scalar", "full"),
        "b_rows": ("full", "rows"),
        "a_rows": ("rows", "full"),
    }[kind]


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    return _emit("add", a.data + b.data, (a, b), kind=kind)


@rule("add")
def _add_bw(rec: Record, g: np.ndarray):
    sa, sb = _sides(rec.ctx["kind"])
    a, b = rec.inputs
    return _reduce_to(g, a.shape, sa), _reduce_to(g, b.shape, sb)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    return _emit("sub", a.data - b.data, (a, b), kind=kind)


@rule("sub")
def _sub_bw(rec: Record, g: np.ndarray):
    sa, sb = _sides(rec.ctx["kind"])
    a, b = rec.inputs
    return _reduce_to(g, a.shape, sa), -_reduce_to(g, b.shape, sb)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    return _emit("mul", a.data * b.data, (a, b), kind=kind)


@rule("mul")
def _mul_bw(rec: Record, g: np.ndarray):
    sa, sb = _sides(rec.ctx["kind"])
    a, b = rec.inputs
    ga = _reduce_to(g * b.data, a.shape, sa) if a.requires_grad else None
    gb = _reduce_to(g * a.data, b.shape, sb) if b.requires_grad else None
    return ga, gb


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * c, (x,), c=c)


@rule("scale")
def _scale_bw(rec: Record, g: np.ndarray):
    return (g * rec.ctx["c"],)


def tanh(x: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(x.data), (x,))


@rule("tanh")
def _tanh_bw(rec: Record, g: np.ndarray):
    y = rec.out.data
    return (g * (1.0 - y * y),)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    return _emit("gelu", 0.5 * v * (1.0 + t), (x,), t=t)


@rule("gelu")
def _gelu_bw(rec: Record, g: np.ndarray):
    v = rec.inputs[0].data
    t = rec.ctx["t"]
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)


def exp(x: Tensor) -> Tensor:
    return _emit("exp", np.exp(x.data), (x,))


@rule("exp")
def _exp_bw(rec: Record, g: np.ndarray):
    return (g * rec.out.data,)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log of non-positive value")
    return _emit("log", np.log(x.data), (x,))


@rule("log")
def _log_bw(rec: Record, g: np.ndarray):
    return (g / rec.inputs[0].data,)


def dropout(x: Tensor, p: float, seed: int, step: int, site: int, training: bool = True) -> Tensor:
    """Inverted dropout whose mask is a pure function of (seed, step, site)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    tape = active_tape()
    if tape is not None:
        tape.stochastic = True
    rng = np.random.default_rng([seed, step, site])
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), keep=keep)


@rule("dropout")
def _dropout_bw(rec: Record, g: np.ndarray):
    return (g * rec.ctx["keep"],)


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,))


@rule("reshape")
def _reshape_bw(rec: Record, g: np.ndarray):
    return (g.reshape(rec.inputs[0].shape),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _emit("permute", np.transpose(x.data, axes), (x,), axes=tuple(axes))


@rule("permute")
def _permute_bw(rec: Record, g: np.ndarray):
    return (np.transpose(g, np.argsort(rec.ctx["axes"])),)


def transpose(x: Tensor) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return _emit("sum", np.asarray(x.data.sum(axis=axis)), (x,), axis=axis)


@rule("sum")
def _sum_bw(rec: Record, g: np.ndarray):
    shape = rec.inputs[0].shape
    axis = rec.ctx["axis"]
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs), sizes=sizes, axis=axis)


@rule("concat")
def _concat_bw(rec: Record, g: np.ndarray):
    splits = np.cumsum(rec.ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=rec.ctx["axis"]))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"ids out of range for table with {table.shape[0]} rows")
    return _emit("take_rows", table.data[ids], (table,), ids=ids)


@rule("take_rows")
def _take_rows_bw(rec: Record, g: np.ndarray):
    table = rec.inputs[0]
    out = np.zeros_like(table.data)
    np.add.at(out, rec.ctx["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (out,)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` are treated as rows."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@rule("matmul")
def _matmul_bw(rec: Record, g: np.ndarray):
    a, b = rec.inputs
    ga = g @ b.data.T if a.requires_grad else None
    gb = None
    if b.requires_grad:
        k, n = b.shape
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
    return ga, gb


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over matching leading axes."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    return _emit("bmm", a.data @ b.data, (a, b))


@rule("bmm")
def _bmm_bw(rec: Record, g: np.ndarray):
    a, b = rec.inputs
    ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
    gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
    return ga, gb


# ---------------------------------------------------------------------------
# fused neural-net ops


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, 1 = keep) removes entries."""
    v = x.data
    if mask is not None:
        v = np.where(mask.astype(bool), v, -np.inf)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    return _emit("softmax", e / e.sum(axis=-1, keepdims=True), (x,))


@rule("softmax")
def _softmax_bw(rec: Record, g: np.ndarray):
    y = rec.out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def cross_entropy_from_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if (labels < 0).any() or (labels >= m).any():
        raise ValueError(f"labels must lie in [0, {m})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    return _emit("cross_entropy", np.asarray(loss), (logits,), labels=labels, p=np.exp(logp))


@rule("cross_entropy")
def _ce_bw(rec: Record, g: np.ndarray):
    p = rec.ctx["p"].copy()
    labels = rec.ctx["labels"]
    n = p.shape[0]
    p[np.arange(n), labels] -= 1.0
    return (p * (g / n),)


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape[:2]}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("empty document: mask row with no tokens")
    w = mask / counts[:, None]
    return _emit("mean_pool", np.einsum("nt,nth->nh", w, x.data), (x,), w=w)


@rule("mean_pool")
def _pool_bw(rec: Record, g: np.ndarray):
    return (rec.ctx["w"][:, :, None] * g[:, None, :],)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float | None = None) -> Tensor:
    h = x.shape[-1]
    if h < 2:
        raise ValueError("layer_norm needs at least 2 features")
    if eps is None:
        eps = 1e-12 if x.dtype == np.float64 else 1e-5
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _emit("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), xhat=xhat, inv=inv)


@rule("layer_norm")
def _ln_bw(rec: Record, g: np.ndarray):
    x, gain, _ = rec.inputs
    xhat, inv = rec.ctx["xhat"], rec.ctx["inv"]
    h = x.shape[-1]
    gx = g * gain.data
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    flat_g = g.reshape(-1, h)
    return dx, (flat_g * xhat.reshape(-1, h)).sum(axis=0), flat_g.sum(axis=0)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero-norm vector")
    y = x.data / norms
    return _emit("l2_normalize", y, (x,), norms=norms)


@rule("l2_normalize")
def _l2n_bw(rec: Record, g: np.ndarray):
    y = rec.out.data
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / rec.ctx["norms"],)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = active_tape()
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if tape is None:
        raise ValueError("no tape to replay")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[rec.op](rec, g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                k = id(inp)
                grads[k] = grads[k] + ig if k in grads else ig


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def grad_check(f: Callable[[Tensor], Tensor], x0, step: float = 1e-6, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x0`` with central differences."""
    base = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=DEFAULT_DTYPE)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if tape.stochastic:
        raise ValueError("grad_check requires a deterministic function (disable dropout)")
    backward(y, tape)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    numeric = np.zeros_like(base)
    probe = base.copy()
    for idx in np.ndindex(base.shape):
        orig = probe[idx]
        probe[idx] = orig + step
        fp = f(Tensor(probe.copy())).item()
        probe[idx] = orig - step
        fm = f(Tensor(probe.copy())).item()
        probe[idx] = orig
        numeric[idx] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel < tolerance, worst, analytic, numeric)
