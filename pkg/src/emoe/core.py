"""Dense 2D float64 matrices and a small reverse-mode differentiation engine.

A matrix is a C-contiguous ``float64`` ndarray with ``ndim == 2``; :func:`as_matrix`
validates and converts. A :class:`Node` wraps a matrix value together with the
closures that push gradients to its parents. The graph is rebuilt on every
forward pass; :func:`backward` walks it once in reverse topological order.

Every differentiable operation accepts either Nodes or plain arrays (the latter
become constants).
"""
from __future__ import annotations

import os

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ParameterError, ShapeError

CHECKED = os.environ.get("EMOE_CHECKED", "1") != "0"


def as_matrix(data, rows=None, cols=None, check=None) -> np.ndarray:
    """Return ``data`` as a 2D float64 matrix, optionally reshaping row-major.

    Non-finite entries are rejected while checked mode is on.
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ShapeError("rows and cols must be given together")
        if m.size != rows * cols:
            raise ShapeError(f"data length {m.size} != rows*cols = {rows}*{cols}")
        m = m.reshape(rows, cols)
    elif m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2D, got shape {m.shape}")
    if (CHECKED if check is None else check) and not np.isfinite(m).all():
        raise NumericError("matrix contains NaN or Inf")
    return m


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(node, backward_fn)`` pairs; ``backward_fn`` maps the
    gradient of this node to the gradient contribution for that parent.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "name", "_consumed")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) and value.ndim == 2 else as_matrix(value)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        # constants never need their closures kept alive
        self.parents = tuple(parents) if self.requires_grad else ()
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def param(value, name=None) -> Node:
    """A leaf that gradients are collected for."""
    return Node(as_matrix(value).copy(), requires_grad=True, name=name)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(as_matrix(value, check=False))


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(as_matrix(x, check=False))


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} (inner dimensions {a.shape[1]} != {b.shape[0]})")
    av, bv = a.value, b.value
    return Node(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def transpose(a) -> Node:
    a = _node(a)
    return Node(np.ascontiguousarray(a.value.T), [(a, lambda g: g.T)])


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape(a, b, "add")
    return Node(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape(a, b, "sub")
    return Node(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Node:
    """Elementwise product."""
    a, b = _node(a), _node(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def scale(a, c: float) -> Node:
    a = _node(a)
    c = float(c)
    return Node(a.value * c, [(a, lambda g: g * c)])


def add_row(a, row) -> Node:
    """``a + row`` with a 1 x cols row broadcast down the rows (bias add)."""
    a, row = _node(a), _node(row)
    if row.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row: row shape {row.shape} does not match (1, {a.shape[1]})")
    return Node(a.value + row.value, [(a, lambda g: g), (row, lambda g: g.sum(axis=0, keepdims=True))])


def mul_row(a, row) -> Node:
    """``a * row`` with a 1 x cols row broadcast down the rows."""
    a, row = _node(a), _node(row)
    if row.shape != (1, a.shape[1]):
        raise ShapeError(f"mul_row: row shape {row.shape} does not match (1, {a.shape[1]})")
    av, rv = a.value, row.value
    return Node(av * rv, [(a, lambda g: g * rv), (row, lambda g: (g * av).sum(axis=0, keepdims=True))])


def mul_col(a, col) -> Node:
    """``a * col`` with an rows x 1 column broadcast across columns."""
    a, col = _node(a), _node(col)
    if col.shape != (a.shape[0], 1):
        raise ShapeError(f"mul_col: column shape {col.shape} does not match ({a.shape[0]}, 1)")
    av, cv = a.value, col.value
    return Node(av * cv, [(a, lambda g: g * cv), (col, lambda g: (g * av).sum(axis=1, keepdims=True))])


def mul_scalar(a, s) -> Node:
    """``a * s`` for a 1 x 1 node ``s`` (a learned scalar)."""
    a, s = _node(a), _node(s)
    if s.shape != (1, 1):
        raise ShapeError(f"mul_scalar: expected a 1x1 scalar, got {s.shape}")
    av, sv = a.value, s.value[0, 0]
    return Node(av * sv, [(a, lambda g: g * sv), (s, lambda g: np.array([[(g * av).sum()]]))])


def total(a) -> Node:
    """Sum of all entries as a 1 x 1 node."""
    a = _node(a)
    shape = a.shape
    return Node(np.array([[a.value.sum()]]), [(a, lambda g: np.full(shape, g[0, 0]))])


def mean(a) -> Node:
    return scale(total(a), 1.0 / a.value.size)


def square(a) -> Node:
    a = _node(a)
    av = a.value
    return Node(av * av, [(a, lambda g: 2.0 * g * av)])


# ---------------------------------------------------------------- row indexing


def take_rows(a, idx) -> Node:
    """Gather rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = _node(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    unique = idx.size == 0 or np.bincount(idx, minlength=n).max() <= 1

    def back(g):
        out = np.zeros((n, g.shape[1]))
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return Node(a.value[idx], [(a, back)])


def scatter_rows(parts, n_rows: int, cols: int) -> Node:
    """Assemble an ``n_rows x cols`` matrix from ``(node, row_indices)`` pieces.

    Target rows must be disjoint; rows not covered are zero.
    """
    out = np.zeros((n_rows, cols))
    links = []
    for node, idx in parts:
        node = _node(node)
        idx = np.asarray(idx, dtype=np.int64)
        if node.shape != (len(idx), cols):
            raise ShapeError(f"scatter_rows: piece {node.shape} vs {len(idx)} target rows of width {cols}")
        out[idx] = node.value
        links.append((node, lambda g, idx=idx: g[idx]))
    return Node(out, links)


def pick(a, idx) -> Node:
    """Column ``idx[i]`` of every row ``i``, as an rows x 1 node."""
    a = _node(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, idx] = g[:, 0]
        return out

    return Node(a.value[rows, idx][:, None], [(a, back)])


# ---------------------------------------------------------------- nonlinear ops


def softmax_rows(m, tau: float = 1.0) -> Node:
    """Row-wise softmax of ``m / tau`` with max subtraction."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    m = _node(m)
    tau = float(tau)
    p = kernels.softmax_rows(m.value, tau)
    return Node(p, [(m, lambda g: kernels.softmax_rows_backward(p, np.ascontiguousarray(g), tau))])


def gelu(m) -> Node:
    """Tanh-approximation GELU."""
    m = _node(m)
    x = m.value
    return Node(kernels.gelu(x), [(m, lambda g: kernels.gelu_backward(x, np.ascontiguousarray(g)))])


def layernorm(m, gain, bias, eps: float = 1e-5) -> Node:
    m, gain, bias = _node(m), _node(gain), _node(bias)
    cols = m.shape[1]
    if gain.shape != (1, cols) or bias.shape != (1, cols):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} must be (1, {cols})")
    if not eps > 0:
        raise ParameterError(f"layernorm eps must be positive, got {eps}")
    y, xhat, rstd = kernels.layernorm(m.value, gain.value, bias.value, float(eps))
    gv = gain.value
    cache = {}

    def grads(g):
        key = id(g)
        if cache.get("key") != key:
            cache["key"] = key
            cache["val"] = kernels.layernorm_backward(np.ascontiguousarray(g), xhat, rstd, gv)
        return cache["val"]

    return Node(
        y,
        [
            (m, lambda g: grads(g)[0]),
            (gain, lambda g: grads(g)[1][None, :]),
            (bias, lambda g: grads(g)[2][None, :]),
        ],
    )


def energy(z, eps: float) -> Node:
    """Per-row squared coordinates divided by (row sum of squares + eps)."""
    z = _node(z)
    e, denom = kernels.energy(z.value, float(eps))
    zv = z.value
    return Node(e, [(z, lambda g: kernels.energy_backward(zv, e, denom, np.ascontiguousarray(g)))])


def cross_entropy(logits, labels) -> Node:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``."""
    logits = _node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but labels of shape {labels.shape}")
    x = logits.value
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - x[rows, labels]).mean()

    def back(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        return p * (g[0, 0] / n)

    return Node(np.array([[loss]]), [(logits, back)])


def attention(q, k, v, seq_len: int, heads: int) -> Node:
    """Multi-head scaled dot-product attention over independent sequences.

    ``q``, ``k``, ``v`` are ``(B*seq_len) x D``: B sequences stacked row-wise.
    Returns the concatenated head outputs, also ``(B*seq_len) x D``.
    """
    q, k, v = _node(q), _node(k), _node(v)
    _same_shape(q, k, "attention")
    _same_shape(q, v, "attention")
    rows, d = q.shape
    if rows % seq_len:
        raise ShapeError(f"attention: {rows} rows is not a multiple of seq_len={seq_len}")
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    b, dh = rows // seq_len, d // heads
    scale_ = 1.0 / np.sqrt(dh)

    def split(x):  # (B*T, D) -> (B, H, T, dh)
        return x.reshape(b, seq_len, heads, dh).transpose(0, 2, 1, 3)

    def merge(x):  # (B, H, T, dh) -> (B*T, D)
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(rows, d)

    qs, ks, vs = split(q.value), split(k.value), split(v.value)
    scores = (qs @ ks.transpose(0, 1, 3, 2)) * scale_
    probs = kernels.softmax_rows(np.ascontiguousarray(scores).reshape(-1, seq_len), 1.0)
    probs = probs.reshape(b, heads, seq_len, seq_len)
    out = merge(probs @ vs)
    cache = {}

    def grads(g):
        key = id(g)
        if cache.get("key") != key:
            go = split(g)
            dv = probs.transpose(0, 1, 3, 2) @ go
            dp = go @ vs.transpose(0, 1, 3, 2)
            ds = kernels.softmax_rows_backward(
                probs.reshape(-1, seq_len), np.ascontiguousarray(dp).reshape(-1, seq_len), 1.0
            ).reshape(b, heads, seq_len, seq_len) * scale_
            dq = ds @ ks
            dk = ds.transpose(0, 1, 3, 2) @ qs
            cache["key"] = key
            cache["val"] = (merge(dq), merge(dk), merge(dv))
        return cache["val"]

    return Node(out, [(q, lambda g: grads(g)[0]), (k, lambda g: grads(g)[1]), (v, lambda g: grads(g)[2])])


# ---------------------------------------------------------------- reverse pass


def _topo_order(root: Node):
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
        for parent, _ in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict:
    """Back-propagate from a scalar ``loss``.

    Returns ``{leaf_node: gradient}`` for every leaf with ``requires_grad``.
    Gradients are also stored on ``node.grad``. A graph may be traversed once;
    call :func:`reset` before traversing it again.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; call reset(loss) first")
    loss._consumed = True
    order = _topo_order(loss)
    grads = {id(loss): np.ones((1, 1))}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, fn in node.parents:
            if not parent.requires_grad:
                continue
            contrib = fn(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return leaves


def reset(loss: Node) -> None:
    """Clear stored gradients so :func:`backward` may run on ``loss`` again."""
    for node in _topo_order(loss):
        node.grad = None
    loss._consumed = False
