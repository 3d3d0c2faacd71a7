"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray``. When gradient recording is enabled
and at least one operand requires a gradient, every primitive stores its
parents and a closure mapping the upstream gradient to per-parent gradients.
:func:`backward` replays those closures in reverse topological order.

The primitive set is deliberately small but fused where it matters for speed
on a single CPU core (attention, RMS normalization, cross-entropy): one
Python-level node per fused primitive keeps interpreter overhead low.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Set to False to skip the per-primitive finiteness scan (benchmarks only).
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def detach(self) -> "Tensor":
        return detach(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a Tensor is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def Parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that requires a gradient."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, "log", (a,), lambda g: (g / a.data,))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) -> inf gives the correct limit 0; scipy's expit is slow on float32
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _np_sigmoid(a.data)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    out = _np_softplus(a.data)
    return _result(out, "softplus", (a,), lambda g: (g * _np_sigmoid(a.data),))


def silu(a: Tensor) -> Tensor:
    s = _np_sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + out * (1 - s)),)

    return _result(out, "silu", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def selu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = SELU_ALPHA * np.expm1(np.minimum(x, 0))
    out = (SELU_LAMBDA * np.where(x > 0, x, neg_part)).astype(a.dtype)

    def backward(g):
        d = np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * (neg_part + SELU_ALPHA))
        return (g * d,)

    return _result(out, "selu", (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), "getitem", (a,), backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis))
    n = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, "mean", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM instead of a batched loop
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            k, n = b.shape
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape) if a.ndim > 1 else g2[0] @ b.data.T
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _result(weight.data[ids], "embedding", (weight,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"rms_norm: feature dims {x.shape} vs {weight.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = xhat * weight.data

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, weight.shape[-1]).sum(axis=0)
        if x.requires_grad:
            dxhat = g * weight.data
            gx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _result(out, "rms_norm", (x, weight), backward)


def _np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    p = _np_softmax(a.data, axis)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _result(p, "softmax", (a,), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on the last axis (half-split pairing).

    ``cos``/``sin`` have shape ``[T, D/2]`` and broadcast over leading axes.
    """
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _result(out, "rope", (x,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, past_k=None, past_v=None) -> Tensor:
    """Scaled dot-product attention with a causal mask.

    Shapes are ``[B, H, T, D]``. Queries occupy the last ``Tq`` positions of the
    key sequence, so query ``i`` may attend key ``j`` iff ``j <= i + Tk - Tq``.
    ``past_k``/``past_v`` are raw arrays prepended to ``k``/``v``; they carry no
    gradient and are only legal when recording is disabled.
    """
    if q.ndim != 4 or k.shape != v.shape or q.shape[:2] != k.shape[:2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    kd, vd = k.data, v.data
    if past_k is not None:
        if is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad):
            raise ContractError("cached attention is inference-only; wrap in no_grad()")
        kd = np.concatenate([past_k, kd], axis=2)
        vd = np.concatenate([past_v, vd], axis=2)
    p = attention_probs(q.data, kd)
    out = p @ vd
    scale = 1.0 / np.sqrt(q.shape[-1])

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _result(out, "attention", (q, k, v), backward)


def _rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def self_attention(qkv: Tensor, n_heads: int, rot: tuple | None = None, kv=None) -> Tensor:
    """Fused multi-head causal self-attention from packed projections.

    ``qkv`` is ``[B, T, 3h]`` (query, key, value blocks). Splits heads, applies
    rotary positions (``rot = (cos, sin)`` for the ``T`` new positions), runs
    causal scaled dot-product attention and merges heads back to ``[B, T, h]``.
    With ``kv`` (a per-layer cache exposing ``append``/``view``) the new
    keys/values are appended and queries attend the whole cached prefix; that
    path is inference-only.
    """
    b, t, h3 = qkv.shape
    if h3 % (3 * n_heads):
        raise ShapeError(f"self_attention: last dim {h3} not divisible by 3*{n_heads}")
    h = h3 // 3
    d = h // n_heads
    parts = qkv.data.reshape(b, t, 3, n_heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    if rot is not None:
        q = _rope_np(q, *rot)
        k = _rope_np(k, *rot)
    if kv is not None:
        if is_grad_enabled() and qkv.requires_grad:
            raise ContractError("cached attention is inference-only; wrap in no_grad()")
        kv.append(k, v)
        k, v = kv.view()
    p = attention_probs(q, k)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(b, t, h)
    scale = 1.0 / np.sqrt(d)

    def backward(g):
        g = g.reshape(b, t, n_heads, d).transpose(0, 2, 1, 3)
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v, -1, -2)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        if rot is not None:
            gq = _rope_np(gq, *rot, inverse=True)
            gk = _rope_np(gk, *rot, inverse=True)
        gall = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4)
        return (gall.reshape(b, t, h3),)

    return _result(out, "self_attention", (qkv,), backward)


def attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    tq, tk = q.shape[-2], k.shape[-2]
    s = (q @ np.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if tq > 1:
        allowed = np.arange(tk)[None, :] <= (np.arange(tq)[:, None] + (tk - tq))
        s = np.where(allowed, s, -np.inf)
    return _np_softmax(s, -1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    v = logits.shape[-1]
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype).reshape(-1)
    n = w.sum()
    if n <= 0:
        raise ContractError("cross_entropy: no valid positions")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    nll = lse - z[np.arange(z.shape[0]), t]
    out = np.asarray((nll * w).sum() / n, dtype=z.dtype)

    def backward(g):
        p = _np_softmax(z, -1)
        p[np.arange(z.shape[0]), t] -= 1
        p *= (w / n)[:, None] * g
        return (p.reshape(logits.shape),)

    return _result(out, "cross_entropy", (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy against soft targets in ``[0, 1]``."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs {y.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)

    def backward(g):
        return (g * (_np_sigmoid(z) - y) / z.size,)

    return _result(out, "bce_with_logits", (logits,), backward)


# ---------------------------------------------------------------------------
# gradient engine
# ---------------------------------------------------------------------------


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient path."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.name = None
    out.op = "detach"
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


class GradTape:
    """Nodes reachable from a root, in topological order, plus accumulated gradients."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topological_order(root)
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self) -> dict[int, np.ndarray]:
        root = self.root
        grads = {id(root): np.ones_like(root.data)}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.grads = leaves
        return leaves


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    if not root.requires_grad:
        return order
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _check_scalar(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"gradient needs a scalar loss, got shape {loss.shape}")


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    _check_scalar(loss)
    tape = GradTape(loss)
    leaf_grads = tape.run()
    for node in tape.nodes:
        g = leaf_grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
    return tape


def gradient(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> dict:
    """Return ``{key: dloss/dparam}`` without touching ``.grad``.

    Keys are the mapping keys when ``params`` is a mapping, else positions.
    Parameters the loss does not reach get a zero array.
    """
    _check_scalar(loss)
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    leaf_grads = GradTape(loss).run()
    return {k: leaf_grads.get(id(p), np.zeros_like(p.data)) for k, p in items}


def Tensor_backward(self: Tensor) -> GradTape:
    return backward(self)


Tensor.backward = Tensor_backward
