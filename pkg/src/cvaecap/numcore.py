"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the caption models need are provided.  Broadcasting is
limited to scalar-vs-tensor and equal shapes; ``linear`` handles the one
row-bias case the networks need.  Gradients accumulate until ``zero_grad``.
"""
from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """A forward value became NaN or infinite."""


class DomainError(NumericError):
    """An op was evaluated outside its mathematical domain."""


class ShapeError(ValueError):
    pass


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=None):
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, op)
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        if self.value.size != 1:
            raise ShapeError(f"cannot convert node of shape {self.shape} to float")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad[...] = 0.0

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value):
    """Leaf node whose gradient is tracked."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value):
    return value if isinstance(value, Node) else Node(value, requires_grad=False)


def _acc(node, g):
    if node.requires_grad:
        node.grad += g


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.value.size == 1 and a.value.ndim == 0 or b.value.ndim == 0:
        return
    if a.value.size == 1 or b.value.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        _acc(a, _reduce_to(g, a.shape))
        _acc(b, _reduce_to(g, b.shape))

    return Node(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        _acc(a, _reduce_to(g, a.shape))
        _acc(b, _reduce_to(-g, b.shape))

    return Node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    a, b = constant(a), constant(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        _acc(a, _reduce_to(g * bv, a.shape))
        _acc(b, _reduce_to(g * av, b.shape))

    return Node(av * bv, (a, b), backward, "mul")


def tanh(a):
    a = constant(a)
    out = np.tanh(a.value)

    def backward(g):
        _acc(a, g * (1.0 - out * out))

    return Node(out, (a,), backward, "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = constant(a)
    out = _sigmoid(a.value)

    def backward(g):
        _acc(a, g * out * (1.0 - out))

    return Node(out, (a,), backward, "sigmoid")


def exp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")

    def backward(g):
        _acc(a, g * out)

    return Node(out, (a,), backward, "exp")


def log(a):
    a = constant(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of a non-positive value")
    av = a.value

    def backward(g):
        _acc(a, g / av)

    return Node(np.log(av), (a,), backward, "log")


def square(a):
    a = constant(a)
    av = a.value

    def backward(g):
        _acc(a, 2.0 * g * av)

    return Node(av * av, (a,), backward, "square")


def total(a):
    """Sum of all entries, as a scalar node."""
    a = constant(a)

    def backward(g):
        _acc(a, np.broadcast_to(g, a.shape))

    return Node(np.sum(a.value), (a,), backward, "sum")


def elementwise(op, *args):
    """Dispatch by name: add, sub, mul, tanh, sigmoid, exp, log, square."""
    table = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid,
             "exp": exp, "log": log, "square": square}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# shape-changing and linear algebra


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.value, b.value

    def backward(g):
        _acc(a, g @ bv.T)
        _acc(b, av.T @ g)

    return Node(av @ bv, (a, b), backward, "matmul")


def linear(x, w, b):
    """``x @ w + b`` with ``b`` broadcast over the rows of ``x``."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {w.shape} do not agree")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape}, expected ({w.shape[1]},)")
    xv, wv = x.value, w.value

    def backward(g):
        _acc(x, g @ wv.T)
        _acc(w, xv.T @ g)
        _acc(b, g.sum(axis=0))

    return Node(xv @ wv + b.value, (x, w, b), backward, "linear")


def reshape(a, shape):
    a = constant(a)
    old = a.shape

    def backward(g):
        _acc(a, g.reshape(old))

    return Node(a.value.reshape(shape), (a,), backward, "reshape")


def take_rows(a, rows):
    """Select rows ``rows`` (a slice or index list) of a 2-D node."""
    a = constant(a)
    out = a.value[rows]
    if out.ndim == 1:
        out = out[None, :]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[rows] += g.reshape(full[rows].shape)
            a.grad += full

    return Node(out, (a,), backward, "take_rows")


def gather(table, ids):
    """Embedding lookup: rows ``ids`` of ``table`` (repeats allowed)."""
    table = constant(table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("gather: index out of range")

    def backward(g):
        if table.requires_grad:
            np.add.at(table.grad, ids, g)

    return Node(table.value[ids].reshape(len(ids), table.shape[1]), (table,), backward, "gather")


def concat_rows(nodes):
    nodes = [constant(n) for n in nodes]
    widths = {n.shape[1] for n in nodes}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(widths)}")
    sizes = [n.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            _acc(n, g[lo:hi])

    return Node(np.concatenate([n.value for n in nodes], axis=0), nodes, backward, "concat_rows")


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits):
    """Row-wise log-softmax of a raw array (no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Summed ``-log softmax(logits)[target]``.

    ``logits`` is a length-V vector with an integer target, or a T x V matrix
    with one target per row.
    """
    logits = constant(logits)
    lv = logits.value
    vector = lv.ndim == 1
    lv2 = lv[None, :] if vector else lv
    targets = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if targets.shape[0] != lv2.shape[0]:
        raise ShapeError("softmax_cross_entropy: one target per row required")
    V = lv2.shape[1]
    if np.any(targets < 0) or np.any(targets >= V):
        raise IndexError("softmax_cross_entropy: target index out of range")
    logp = log_softmax(lv2)
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].sum()

    def backward(g):
        if logits.requires_grad:
            d = np.exp(logp)
            d[rows, targets] -= 1.0
            logits.grad += g * (d[0] if vector else d)

    return Node(loss, (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------------------
# recurrent


class GRUWeights:
    """Parameter nodes of a single-layer gated recurrent cell.

    Gate layout along the last axis is [update, reset, candidate].
    """

    def __init__(self, input_dim, hidden_dim, rng, scale=0.08):
        H = hidden_dim
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.w = parameter(rng.uniform(-scale, scale, (input_dim, 3 * H)))
        self.u = parameter(rng.uniform(-scale, scale, (H, 3 * H)))
        self.b = parameter(np.zeros(3 * H))

    def params(self):
        return {"w": self.w, "u": self.u, "b": self.b}


def gru_step(w, u, b, x, h):
    """One recurrence step on raw arrays; returns the new hidden state."""
    H = h.shape[-1]
    a = x @ w + b
    zr = _sigmoid(a[..., : 2 * H] + h @ u[:, : 2 * H])
    z, r = zr[..., :H], zr[..., H:]
    n = np.tanh(a[..., 2 * H:] + (r * h) @ u[:, 2 * H:])
    return (1.0 - z) * n + z * h


def gru_sequence(x, cell, h0=None):
    """Run the cell over the rows of ``x`` (T x input_dim); returns all T states.

    The whole unrolled recurrence is one graph node; backward is BPTT.
    """
    x = constant(x)
    w, u, b = cell.w, cell.u, cell.b
    T = x.shape[0]
    H = cell.hidden_dim
    if x.value.ndim != 2 or x.shape[1] != cell.input_dim:
        raise ShapeError(f"gru_sequence: input shape {x.shape}, expected (T, {cell.input_dim})")
    wv, uv, bv = w.value, u.value, b.value
    u_zr, u_n = uv[:, : 2 * H], uv[:, 2 * H:]
    a = x.value @ wv + bv
    h = np.zeros(H) if h0 is None else np.asarray(h0, dtype=np.float64)
    hs = np.empty((T, H))
    h_prev = np.empty((T, H))
    zs = np.empty((T, H))
    rs = np.empty((T, H))
    ns = np.empty((T, H))
    for t in range(T):
        h_prev[t] = h
        zr = _sigmoid(a[t, : 2 * H] + h @ u_zr)
        z, r = zr[:H], zr[H:]
        n = np.tanh(a[t, 2 * H:] + (r * h) @ u_n)
        h = (1.0 - z) * n + z * h
        zs[t], rs[t], ns[t], hs[t] = z, r, n, h

    def backward(g):
        da = np.empty((T, 3 * H))
        rh_grad_src = np.empty((T, H))
        dh_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            z, r, n, hp = zs[t], rs[t], ns[t], h_prev[t]
            dh = g[t] + dh_next
            dan = dh * (1.0 - z) * (1.0 - n * n)
            drh = dan @ u_n.T
            daz = dh * (hp - n) * z * (1.0 - z)
            dar = drh * hp * r * (1.0 - r)
            da[t, :H], da[t, H: 2 * H], da[t, 2 * H:] = daz, dar, dan
            rh_grad_src[t] = r * hp
            dh_next = dh * z + drh * r + da[t, : 2 * H] @ u_zr.T
        if w.requires_grad:
            w.grad += x.value.T @ da
        if u.requires_grad:
            u.grad[:, : 2 * H] += h_prev.T @ da[:, : 2 * H]
            u.grad[:, 2 * H:] += rh_grad_src.T @ da[:, 2 * H:]
        if b.requires_grad:
            b.grad += da.sum(axis=0)
        _acc(x, da @ wv.T)

    return Node(hs, (x, w, u, b), backward, "gru_sequence")


# ---------------------------------------------------------------------------


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior grads are reset on each call; leaf grads accumulate across calls.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    interior = [n for n in order if n.backward_fn is not None]
    for n in interior:
        n.grad[...] = 0.0
    root.grad += 1.0
    for n in reversed(interior):
        n.backward_fn(n.grad)
