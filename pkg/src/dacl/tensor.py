"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy buffer. Every op whose inputs require
gradients records its parents and a local backward closure; :func:`backward`
linearises the recorded graph into a :class:`Tape` (parents before children)
and runs the closures in reverse.

Broadcasting is restricted to the trailing-dimension case: the smaller
operand must be a scalar or have a shape equal to a suffix of the larger
operand's shape (e.g. a ``(D,)`` bias against ``(N, D)`` activations).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data, parents, backward_fn, op):
        """Build an op result; records it on the graph only when needed.

        ``backward_fn(g)`` receives the upstream gradient and returns one
        gradient (or ``None``) per parent.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# broadcasting helpers


def _check_trailing(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only trailing-dimension broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    flat = g.reshape(-1, int(np.prod(shape, dtype=np.int64)))
    # a ones-vector product is several times faster than sum(axis=0) on tall arrays
    return (np.ones(flat.shape[0]) @ flat).reshape(shape)


def _rowsum(x):
    """Sum over the last axis, keeping it."""
    return (x @ np.ones(x.shape[-1]))[..., None]


def _rowmax(x):
    n = x.shape[-1]
    if n > 8:
        return x.max(axis=-1, keepdims=True)
    m = x[..., 0].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor.from_op(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return Tensor.from_op(out, (a,), lambda g: (g * (out > 0),), "relu")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ----------------------------------------------------------------------------
# reductions and last-dimension normalisers


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return Tensor.from_op(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return Tensor.from_op(out, (a,), bw, "mean")


def softmax_lastdim(a):
    a = as_tensor(a)
    z = a.data - _rowmax(a.data)
    e = np.exp(z)
    s = e / _rowsum(e)

    def bw(g):
        return (s * (g - _rowsum(g * s)),)

    return Tensor.from_op(s, (a,), bw, "softmax_lastdim")


def log_softmax_lastdim(a):
    a = as_tensor(a)
    z = a.data - _rowmax(a.data)
    lse = np.log(_rowsum(np.exp(z)))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * _rowsum(g),)

    return Tensor.from_op(out, (a,), bw, "log_softmax_lastdim")


def logsumexp_lastdim(a):
    a = as_tensor(a)
    m = _rowmax(a.data)
    e = np.exp(a.data - m)
    tot = _rowsum(e)
    out = (np.log(tot) + m)[..., 0]
    s = e / tot

    def bw(g):
        return (g[..., None] * s,)

    return Tensor.from_op(out, (a,), bw, "logsumexp_lastdim")


def l2_normalize_lastdim(a, eps=1e-12):
    a = as_tensor(a)
    norm = np.maximum(np.sqrt(_rowsum(a.data * a.data)), eps)
    y = a.data / norm

    def bw(g):
        return ((g - y * _rowsum(g * y)) / norm,)

    return Tensor.from_op(y, (a,), bw, "l2_normalize_lastdim")


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got {a.shape}")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, bw, "concat")


def _is_advanced(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take(a, index):
    """Slice or gather; ``index`` is any numpy index expression."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor.from_op(np.array(out, dtype=np.float64), (a,), bw, "slice")


slice_ = take

_FORWARD = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax_lastdim": softmax_lastdim,
    "sum": tsum,
    "mean": mean,
    "l2_normalize_lastdim": l2_normalize_lastdim,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take,
}


def forward(op_kind, *inputs, **kwargs):
    """Dispatch a named op, e.g. ``forward("matmul", a, b)``."""
    try:
        fn = _FORWARD[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}; expected one of {sorted(_FORWARD)}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# tape and backward pass


@dataclass
class Tape:
    """Recorded graph in topological order (every parent precedes its child)."""

    nodes: list = field(default_factory=list)
    parents: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def trace(root):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    pos = {id(n): i for i, n in enumerate(order)}
    return Tape(order, [[pos[id(p)] for p in n._parents] for n in order])


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that is not on the tape")
    tape = trace(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ----------------------------------------------------------------------------
# optimiser


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Update every parameter the loss reached; the rest are left untouched."""
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        sgd_step([self.params[i] for i in live], self.lr, self.momentum, self.weight_decay,
                 [self.buffers[i] for i in live])

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(params, lr, momentum, weight_decay, buffers=None):
    """One in-place update; ``buffers`` carries momentum state between calls."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {i} with shape {p.shape} has no gradient")
    if buffers is None:
        buffers = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, buffers):
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
        p.grad = None
    return buffers
