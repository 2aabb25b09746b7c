"""Tiny reverse-mode autodiff engine on top of numpy.

Ops are plain functions. When a :class:`Tape` is active (``with Tape() as
tape:``) and any input requires a gradient, the op appends a node holding
its inputs, its output and a closure mapping the output gradient to input
gradients. :func:`backward` replays the tape in exact reverse order.

Broadcasting is deliberately limited to bias-add over rows and to a 2-D
weight on the right-hand side of :func:`matmul`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from lotus.errors import DimensionError, InputError, UsageError

F32 = np.float32
F64 = np.float64
_DTYPES = (np.dtype(F32), np.dtype(F64))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(F64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` on ``tape``.

    Gradients accumulate into existing ``.grad`` buffers of leaf tensors, so
    callers zero them between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes or tape.nodes[-1].output is not loss:
        raise UsageError("loss must be the final recorded output of the tape")
    for n in tape.nodes:
        n.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
            t.grad = gi.copy() if t.grad is None else t.grad + gi
    # drop intermediate buffers; only leaves keep gradients
    for n in tape.nodes:
        if n.output is not loss:
            n.output.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``; the one broadcast the engine allows."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                   lambda g: (np.broadcast_to(g, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bw)


def take(x: Tensor, indices) -> Tensor:
    """Row gather ``x[indices]`` along axis 0; gradient scatters back with +=."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise InputError(f"take: index out of range for {x.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", (x,), x.data[idx], bw)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one position along ``axis`` (dropping that axis)."""
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("select", (x,), out, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared weight, gradient summed over ``a``'s batch
    axes) or has exactly ``a``'s leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype {a.dtype} vs {b.dtype}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, bw)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, bw)


class Activation(enum.Enum):
    GELU = "gelu"
    IDENTITY = "identity"


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, fixed on purpose
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(_GELU_K)
    t = np.tanh(c * (d + k * d ** 3))
    y = 0.5 * d * (1 + t)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * k * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * dt),)

    return _record("gelu", (x,), y, bw)


def apply_activation(kind: Activation, x: Tensor) -> Tensor:
    kind = Activation(kind)
    if kind is Activation.GELU:
        return gelu(x)
    return x


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    eps = x.dtype.type(eps)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        gx = g * gamma.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"cross_entropy: labels must lie in [0, {c})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _record("cross_entropy", (logits,), loss, bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              mask: Mapping[str, np.ndarray] | None = None) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place.

    Parameters absent from ``grads`` (or with ``None``) see a zero gradient.
    Under ``mask`` the pruned coordinates get a zero gradient and are pinned
    to exactly 0 after the update.
    """
    if state.t < 0:
        raise UsageError("AdamState.t must be >= 0")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif np.shape(g) != p.shape:
            raise UsageError(f"adam_step: grad for {name} has shape {np.shape(g)}, param {p.shape}")
        keep = None if mask is None else mask.get(name)
        if keep is not None:
            g = g * keep
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        if keep is not None:
            p.data = p.data * keep.astype(p.dtype)
    return params
