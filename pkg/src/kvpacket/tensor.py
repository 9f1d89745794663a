"""Dense float tensors with tape-scoped reverse-mode autodiff.

Only the handful of ops the transformer needs are provided. Recording is
explicit: ops executed inside ``with Tape():`` are remembered when at least one
input participates in gradient flow, everything else runs tape-free.

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)          # w.grad == 2 * w.data
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from kvpacket import flops

DTYPE = np.float32

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "kvpacket_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite / invalid values."""


class TapeError(RuntimeError):
    pass


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if dtype is not None and x.dtype != dtype:
            return x.astype(dtype)
        if not np.issubdtype(x.dtype, np.floating):
            return x.astype(DTYPE)
        return x
    return np.asarray(x, dtype=dtype or DTYPE)


class Tensor:
    """A numpy-backed array that can take part in gradient recording.

    ``data`` keeps the dtype it was given when that is floating point (float32 by
    default); gradient checks run the same code in float64.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("only division by python scalars is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    tape: "Tape"
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], grad_fn) -> None:
        for p in parents:
            if p.requires_grad and p._node is None:
                self._leaves.setdefault(id(p), p)
        node = _Node(self, out, parents, grad_fn)
        out._node = node
        self.nodes.append(node)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def release(self) -> None:
        """Drop the recorded graph; produced tensors become plain constants."""
        for node in self.nodes:
            node.out._node = None
            node.out.requires_grad = False
        self.nodes.clear()

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        if loss._node is None or loss._node.tape is not self:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.grad_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad += pg.astype(p.data.dtype, copy=False)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if not retain_graph:
            self.release()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf recorded on the loss's tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss was not produced under an active tape")
    loss._node.tape.backward(loss)


def active_tape() -> Tape | None:
    return _active_tape.get()


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = _active_tape.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(out, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), grad_fn)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), grad_fn)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    flops.count_matmul(batch * m, n, k)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    # -inf is allowed (attention masking); NaN and +inf are not
    if np.isnan(x.data).any() or np.isposinf(x.data).any():
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), grad_fn)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig
    return _make(y, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / rms(x) * scale`` over the last axis."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    y = xhat * scale.data
    d = x.shape[-1]

    def grad_fn(g):
        gs = g * scale.data
        gx = inv * (gs - xhat * (gs * xhat).sum(axis=-1, keepdims=True) / d)
        gscale = _unbroadcast(g * xhat, scale.shape) if scale.requires_grad else None
        return gx, gscale

    return _make(y, (x, scale), grad_fn)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (2j, 2j+1) pairs of the last axis by per-pair angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``. The backward pass is the
    inverse rotation.
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"pair rotation needs an even last axis, got {x.shape[-1]}")
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)

    def rot(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (v.shape[-1],)), dtype=v.dtype)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _make(rot(x.data, sin), (x,), lambda g: (rot(g, -sin),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean token cross-entropy over all leading positions."""
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=flat.dtype) if weights is None else np.asarray(weights, dtype=flat.dtype).reshape(-1)
    denom = max(float(w.sum()), 1.0)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(len(t)), t]
    loss = np.asarray((nll * w).sum() / denom, dtype=flat.dtype)

    def grad_fn(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / denom)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), grad_fn)


def kl_divergence(p, q: Tensor) -> Tensor:
    """Mean over rows of KL(p || q); ``p`` is a constant target distribution."""
    p_arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=q.dtype)
    if p_arr.shape != q.shape or q.ndim != 2:
        raise ShapeError(f"kl_divergence expects matching [T, V] inputs, got {p_arr.shape} and {q.shape}")
    support = p_arr > 0
    if np.any(q.data[support] <= 0):
        raise NumericError("student distribution has zero mass where the teacher has support")
    rows = q.shape[0]
    safe_p = np.where(support, p_arr, 1.0)
    safe_q = np.where(support, q.data, 1.0)
    terms = np.where(support, p_arr * (np.log(safe_p) - np.log(safe_q)), 0.0)
    loss = np.asarray(terms.sum() / rows, dtype=q.dtype)

    def grad_fn(g):
        return (np.where(support, -p_arr / safe_q, 0.0).astype(q.dtype) * (g / rows),)

    return _make(loss, (q,), grad_fn)
