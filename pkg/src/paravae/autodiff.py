"""A small reverse-mode autodiff tape over dense float64 numpy arrays.

Every differentiable quantity in the model is a :class:`Node` recorded on a
:class:`Tape`.  The op set is closed::

    matmul, add, mul, concat, slice, sigmoid, tanh, exp, log, softmax,
    embedding, sum, mean, scale

``add`` broadcasts only a row vector over the rows of a matrix; every other
binary op needs equal shapes.

>>> tape = Tape()
>>> x = tape.leaf([3.0])
>>> loss = tape.forward("sum", [x * x])
>>> tape.backward(loss)[x]
array([6.])
"""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np

from .errors import (
    IndexOutOfBoundsError,
    NonFiniteError,
    NonScalarLossError,
    ShapeMismatchError,
)

OPS = (
    "matmul",
    "add",
    "mul",
    "concat",
    "slice",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "embedding",
    "sum",
    "mean",
    "scale",
)


class Node:
    """One value on a tape. Leaves have no parents."""

    __slots__ = ("id", "value", "op", "parents", "attrs", "requires_grad", "tape")

    def __init__(self, tape, node_id, value, op, parents, attrs, requires_grad):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.forward("add", [self, other])

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.forward("mul", [self, other])
        return self.tape.forward("scale", [self], factor=float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.forward("matmul", [self, other])

    def __neg__(self):
        return self.tape.forward("scale", [self], factor=-1.0)

    def __sub__(self, other):
        return self + (-other)


# ---------------------------------------------------------------------------
# forward rules


def _all_finite(a):
    # NaN and Inf survive a sum; only a finite-but-overflowing sum needs the slow path
    s = np.add.reduce(a, axis=None)
    return math.isfinite(s) or bool(np.isfinite(a).all())


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _fwd_add(vals, attrs):
    a, b = vals
    if a.shape == b.shape:
        return a + b
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a + b
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return a + b
    raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}")


def _fwd_mul(vals, attrs):
    a, b = vals
    _check_same_shape("mul", a, b)
    return a * b


def _fwd_concat(vals, attrs):
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or v.shape[:-1] != lead:
            raise ShapeMismatchError(
                f"concat: leading dims differ ({vals[0].shape} vs {v.shape})"
            )
    return np.concatenate(vals, axis=-1)


def _fwd_slice(vals, attrs):
    (a,) = vals
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    dim = a.shape[axis]
    if not 0 <= start < stop <= dim:
        raise ShapeMismatchError(f"slice: [{start}:{stop}] out of range for dim {dim}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)].copy()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_log(vals, attrs):
    (a,) = vals
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


def _fwd_exp(vals, attrs):
    (a,) = vals
    with np.errstate(over="ignore"):
        return np.exp(a)


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_embedding(vals, attrs):
    (table,) = vals
    idx = attrs["indices"]
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfBoundsError(
            f"embedding: index out of range for table with {table.shape[0]} rows"
        )
    return table[idx]


def _fwd_sum(vals, attrs):
    axis = attrs.get("axis")
    return np.asarray(vals[0].sum(axis=axis), dtype=np.float64)


def _fwd_mean(vals, attrs):
    axis = attrs.get("axis")
    return np.asarray(vals[0].mean(axis=axis), dtype=np.float64)


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "sigmoid": lambda vals, attrs: _sigmoid(vals[0]),
    "tanh": lambda vals, attrs: np.tanh(vals[0]),
    "exp": _fwd_exp,
    "log": _fwd_log,
    "softmax": lambda vals, attrs: _softmax(vals[0]),
    "embedding": _fwd_embedding,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "scale": lambda vals, attrs: vals[0] * attrs["factor"],
}


# ---------------------------------------------------------------------------
# vector-Jacobian products: (grad_out, node, parent_values) -> parent grads


def _vjp_matmul(g, node, vals):
    a, b = vals
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


def _vjp_add(g, node, vals):
    a, b = vals
    ga = g if a.shape == g.shape else g.sum(axis=0)
    gb = g if b.shape == g.shape else g.sum(axis=0)
    return ga, gb


def _vjp_concat(g, node, vals):
    out, start = [], 0
    for v in vals:
        stop = start + v.shape[-1]
        out.append(g[..., start:stop])
        start = stop
    return out


def _vjp_slice(g, node, vals):
    (a,) = vals
    full = np.zeros_like(a)
    index = [slice(None)] * a.ndim
    index[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    full[tuple(index)] = g
    return (full,)


def _vjp_softmax(g, node, vals):
    y = node.value
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _vjp_embedding(g, node, vals):
    (table,) = vals
    full = np.zeros_like(table)
    np.add.at(full, node.attrs["indices"], g)
    return (full,)


def _expand_reduced(g, node, vals):
    (a,) = vals
    axis = node.attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _vjp_sum(g, node, vals):
    return (np.array(_expand_reduced(g, node, vals)),)


def _vjp_mean(g, node, vals):
    (a,) = vals
    axis = node.attrs.get("axis")
    count = a.size if axis is None else a.shape[axis]
    return (_expand_reduced(g, node, vals) / count,)


_VJP = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "mul": lambda g, node, vals: (g * vals[1], g * vals[0]),
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "sigmoid": lambda g, node, vals: (g * node.value * (1.0 - node.value),),
    "tanh": lambda g, node, vals: (g * (1.0 - node.value * node.value),),
    "exp": lambda g, node, vals: (g * node.value,),
    "log": lambda g, node, vals: (g / vals[0],),
    "softmax": _vjp_softmax,
    "embedding": _vjp_embedding,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "scale": lambda g, node, vals: (g * node.attrs["factor"],),
}

_ARITY = {"matmul": 2, "add": 2, "mul": 2}

# finite inputs always give finite outputs here; leaves are checked on entry
_FINITE_PRESERVING = frozenset({"concat", "slice", "sigmoid", "tanh", "softmax", "embedding"})


class GradientMap(Mapping):
    """Gradients keyed by node (or node id).

    Leaves the loss does not reach read as zero tensors.
    """

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def _key(self, key):
        return key.id if isinstance(key, Node) else key

    def __getitem__(self, key):
        node_id = self._key(key)
        if node_id in self._grads:
            return self._grads[node_id]
        node = self._tape.nodes[node_id]
        if node.parents:
            raise KeyError(node_id)
        return np.zeros_like(node.value)

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def __contains__(self, key):
        return self._key(key) in self._grads


class Tape:
    """Append-only record of operations.

    With ``record=False`` values are computed but nothing is kept, which is
    what decoding and finite-difference probes use.
    """

    def __init__(self, record=True):
        self.record = record
        self.nodes = []
        self._count = 0

    def __len__(self):
        return len(self.nodes)

    def _new(self, value, op, parents, attrs, requires_grad):
        node = Node(
            self,
            self._count,
            value,
            op,
            parents if self.record else (),
            attrs,
            requires_grad,
        )
        self._count += 1
        if self.record:
            self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad=True):
        """Wrap ``value`` without copying when it already is a float64 array."""
        value = np.asarray(value, dtype=np.float64)
        if not _all_finite(value):
            raise NonFiniteError("leaf value contains NaN or Inf")
        return self._new(value, "leaf", (), None, requires_grad)

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def forward(self, op, inputs, **attrs):
        """Apply ``op`` to ``inputs`` (nodes on this tape) and record the result."""
        rule = _FORWARD.get(op)
        if rule is None:
            raise ValueError(f"unknown op {op!r}")
        inputs = tuple(inputs)
        arity = _ARITY.get(op)
        if arity is not None and len(inputs) != arity:
            raise ValueError(f"{op} takes {arity} inputs, got {len(inputs)}")
        if op == "slice":
            attrs.setdefault("axis", -1)
        elif op == "embedding":
            attrs["indices"] = np.asarray(attrs["indices"], dtype=np.int64)
        value = rule([x.value for x in inputs], attrs)
        if op not in _FINITE_PRESERVING and not _all_finite(value):
            raise NonFiniteError(f"{op} produced a non-finite value")
        requires_grad = any(x.requires_grad for x in inputs) if self.record else False
        node = Node(self, self._count, value, op, inputs if self.record else (), attrs,
                    requires_grad)
        self._count += 1
        if self.record:
            self.nodes.append(node)
        return node

    def backward(self, loss):
        """Reverse accumulation from scalar ``loss``; each node is visited once."""
        if not self.record:
            raise RuntimeError("backward needs a recording tape")
        if loss.value.size != 1:
            raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
        grads = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.parents:
                continue
            parent_grads = _VJP[node.op](g, node, [p.value for p in node.parents])
            for parent, pg in zip(node.parents, parent_grads):
                if not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        return GradientMap(self, grads)


# ---------------------------------------------------------------------------
# functional helpers


def matmul(a, b):
    return a.tape.forward("matmul", [a, b])


def concat(nodes):
    return nodes[0].tape.forward("concat", nodes)


def slice_(x, start, stop, axis=-1):
    return x.tape.forward("slice", [x], start=start, stop=stop, axis=axis)


def sigmoid(x):
    return x.tape.forward("sigmoid", [x])


def tanh(x):
    return x.tape.forward("tanh", [x])


def exp(x):
    return x.tape.forward("exp", [x])


def log(x):
    return x.tape.forward("log", [x])


def softmax(x):
    return x.tape.forward("softmax", [x])


def embedding(table, indices):
    return table.tape.forward("embedding", [table], indices=indices)


def sum_(x, axis=None):
    return x.tape.forward("sum", [x], axis=axis)


def mean(x, axis=None):
    return x.tape.forward("mean", [x], axis=axis)


def scale(x, factor):
    return x.tape.forward("scale", [x], factor=float(factor))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check_params(builder, params, epsilon=1e-5, names=None):
    """Compare tape gradients with central differences for every coordinate.

    ``builder(tape, nodes)`` must return a scalar node, where ``nodes`` maps
    each key of ``params`` to a leaf.  Returns the worst
    ``|analytic - numeric| / max(1, |analytic|)`` per parameter name;
    non-finite intermediate values report ``inf``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(params) if names is None else list(names)

    def evaluate(values, record):
        tape = Tape(record=record)
        nodes = {k: tape.leaf(v) for k, v in values.items()}
        return tape, nodes, builder(tape, nodes)

    def probe():
        # values differ from the checked ones by one epsilon; skip re-validation
        tape = Tape(record=False)
        nodes = {k: tape._new(v, "leaf", (), None, True) for k, v in params.items()}
        return float(builder(tape, nodes).value)

    try:
        tape, nodes, loss = evaluate(params, True)
        grads = tape.backward(loss)
    except (NonFiniteError, FloatingPointError):
        return {k: float("inf") for k in names}

    errors = {}
    for name in names:
        analytic = grads[nodes[name]]
        base = params[name]
        flat = base.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + epsilon
                up = probe()
                flat[i] = orig - epsilon
                down = probe()
            except (NonFiniteError, FloatingPointError):
                worst = float("inf")
                break
            finally:
                flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        errors[name] = worst
    return errors


def grad_check(builder, point, epsilon=1e-5):
    """Max relative gradient error of ``builder(tape, x)`` at ``point``."""
    errs = grad_check_params(lambda tape, nodes: builder(tape, nodes["x"]), {"x": point}, epsilon)
    return errs["x"]
