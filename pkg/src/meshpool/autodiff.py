"""Minimal reverse-mode differentiation over dense double-precision arrays.

Operations record onto the active :class:`Tape` whenever at least one input
requires a gradient. ``backward`` walks the tape in exact reverse order and
accumulates analytic gradients additively into every participating Value
with ``requires_grad=True``.

Broadcasting is restricted to the leading dimension: a (M,) or (1, M)
operand may be combined with an (N, M) operand, nothing else.
"""
import contextlib
import threading

import numpy as np

from .errors import NumericalError, ShapeError, StateError

__all__ = [
    "Value", "Tape", "current_tape", "no_grad", "record", "backward",
    "as_value", "add", "sub", "mul", "scalar_mul", "neg", "exp", "square",
    "matmul", "transpose_matmul", "matmul_transpose", "gather_rows",
    "segment_sum", "row_softmax", "leaky_relu", "reduce_sum", "reshape",
    "scale_rows", "cross_entropy_logits", "mean_squared_error",
    "grad_check", "grad_check_per_param",
]


class Value:
    """A dense array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tape_id", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.tape_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element Value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "kind")

    def __init__(self, out, parents, backward_fn, kind):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tape:
    """Topologically ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        for node in self.nodes:
            node.out.tape_id = None
            node.out._tape = None
        self.nodes = []

    def append(self, out, parents, backward_fn, kind):
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, backward_fn, kind))

    def backward(self, root):
        if root._tape is not self or root.tape_id is None:
            raise StateError("backward called on a Value that was not produced on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes[: root.tape_id + 1]):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.backward_fn(gout)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if g.shape != parent.data.shape:
                    g = g.reshape(parent.data.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g


_state = threading.local()


def current_tape():
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _recording():
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    previous = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = previous


@contextlib.contextmanager
def use_tape(tape):
    previous = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


def backward(root):
    tape = root._tape
    if tape is None:
        raise StateError("backward before forward: Value has no recorded computation")
    tape.backward(root)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def record(data, parents, backward_fn, kind="custom"):
    """Wrap ``data`` as the output of an op with the given parents.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    parents = tuple(parents)
    needs = _recording() and any(p.requires_grad for p in parents)
    out = Value.__new__(Value)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out.tape_id = None
    out._tape = None
    if needs:
        current_tape().append(out, parents, backward_fn, kind)
    return out


def _broadcast_shapes(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return None
    if len(sa) == 2 and (sb == (sa[1],) or sb == (1, sa[1])):
        return "b"
    if len(sb) == 2 and (sa == (sb[1],) or sa == (1, sb[1])):
        return "a"
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _sequential_sum(a):
    # cumsum accumulates strictly left to right, unlike pairwise np.sum
    flat = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    return float(np.cumsum(flat)[-1]) if flat.size else 0.0


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shapes(a, b, "add")
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(data, (a, b), back, "add")


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shapes(a, b, "sub")
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record(data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shapes(a, b, "mul")
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(data, (a, b), back, "mul")


def scalar_mul(a, c):
    a = as_value(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def neg(a):
    a = as_value(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_value(a)
    data = np.exp(a.data)
    return record(data, (a,), lambda g: (g * data,), "exp")


def square(a):
    a = as_value(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def _check_2d(x, op):
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D operand, got shape {x.shape}")


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return record(a.data @ b.data, (a, b), back, "matmul")


def transpose_matmul(a, b):
    """aᵀ b."""
    a, b = as_value(a), as_value(b)
    _check_2d(a, "transpose_matmul")
    _check_2d(b, "transpose_matmul")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"transpose_matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return b.data @ g.T, a.data @ g

    return record(a.data.T @ b.data, (a, b), back, "transpose_matmul")


def matmul_transpose(a, b):
    """a bᵀ."""
    a, b = as_value(a), as_value(b)
    _check_2d(a, "matmul_transpose")
    _check_2d(b, "matmul_transpose")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_transpose: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.data, g.T @ a.data

    return record(a.data @ b.data.T, (a, b), back, "matmul_transpose")


def gather_rows(x, index):
    x = as_value(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    return record(x.data[index], (x,), back, "gather_rows")


def segment_sum(x, segment_ids, num_segments, weights=None):
    """Sum rows of ``x`` into ``num_segments`` groups, optionally weighted per row."""
    x = as_value(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: ids shape {ids.shape} vs data shape {x.shape}")
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = x.data * w.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, ids, rows)

    def back(g):
        return (g[ids] * w.reshape((-1,) + (1,) * (x.data.ndim - 1)),)

    return record(out, (x,), back, "segment_sum")


def row_softmax(x):
    x = as_value(x)
    _check_2d(x, "row_softmax")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record(s, (x,), back, "row_softmax")


def leaky_relu(x, slope=0.01):
    x = as_value(x)
    slope = float(slope)
    positive = x.data > 0
    data = np.where(positive, x.data, slope * x.data)

    def back(g):
        return (np.where(positive, g, slope * g),)

    return record(data, (x,), back, "leaky_relu")


def reduce_sum(x, axis=None):
    x = as_value(x)
    if axis is None:
        data = np.array(_sequential_sum(x.data))
    else:
        data = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return record(data, (x,), back, "reduce_sum")


def reshape(x, shape):
    x = as_value(x)
    data = x.data.reshape(shape)
    return record(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def scale_rows(x, v):
    """Multiply row i of ``x`` by ``v[i]``."""
    x, v = as_value(x), as_value(v)
    if v.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: scale shape {v.shape} vs data shape {x.shape}")
    data = x.data * v.data[:, None]

    def back(g):
        return g * v.data[:, None], (g * x.data).sum(axis=1)

    return record(data, (x, v), back, "scale_rows")


def cross_entropy_logits(logits, target):
    """Cross-entropy of softmax(logits) against a one-hot class index (log-sum-exp fused)."""
    logits = as_value(logits)
    z = logits.data.reshape(-1)
    target = int(target)
    if not 0 <= target < z.size:
        raise ShapeError(f"cross_entropy_logits: class {target} out of range for {z.size} logits")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def back(g):
        grad = p.copy()
        grad[target] -= 1.0
        return ((float(g) * grad).reshape(logits.shape),)

    return record(np.array(lse - z[target]), (logits,), back, "cross_entropy")


def mean_squared_error(pred, target):
    pred = as_value(pred)
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - t
    n = diff.size
    total = _sequential_sum(diff * diff)

    def back(g):
        return ((2.0 * float(g) / n) * diff,)

    return record(np.array(total / n), (pred,), back, "mse")


def _evaluate(f):
    tape = Tape()
    with use_tape(tape):
        out = f()
    value = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericalError(f"grad_check: objective is not finite ({value})")
    return out, tape


def grad_check_per_param(f, params, h=1e-5, names=None, floor=1e-8):
    """Compare reverse-mode and central-difference gradients entry by entry.

    Returns a list of ``(name, max_rel_error, worst_flat_index)`` per
    parameter, where the relative error of an entry is
    ``|ad - fd| / max(floor, |ad| + |fd|)``. Below ``floor`` the test is
    effectively absolute. Central differences cannot resolve gradients much
    smaller than ``1e-16 |f| / h``, so callers with many near-zero entries
    may need a larger floor.
    """
    for p in params:
        p.grad = None
    out, tape = _evaluate(f)
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    tape.clear()
    for p in params:
        p.grad = None

    results = []
    with no_grad():
        for idx, p in enumerate(params):
            flat = p.data.reshape(-1)
            ad = analytic[idx].reshape(-1)
            worst, worst_at = 0.0, -1
            for k in range(flat.size):
                saved = flat[k]
                flat[k] = saved + h
                f_plus = _evaluate(f)[0].data
                flat[k] = saved - h
                f_minus = _evaluate(f)[0].data
                flat[k] = saved
                fd = (float(f_plus) - float(f_minus)) / (2.0 * h)
                err = abs(ad[k] - fd) / max(floor, abs(ad[k]) + abs(fd))
                if err > worst:
                    worst, worst_at = err, k
            name = names[idx] if names is not None else (p.name or f"param{idx}")
            results.append((name, worst, worst_at))
    return results


def grad_check(f, params, h=1e-5, floor=1e-8):
    """Max relative error between reverse-mode and central-difference gradients."""
    return max((err for _, err, _ in grad_check_per_param(f, params, h, floor=floor)),
               default=0.0)
