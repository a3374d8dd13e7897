"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every operation links its output tensor back to its inputs
together with a vector-Jacobian closure, so the recorded graph is in
execution (topological) order by construction. The graph lives for a single
forward pass and is rebuilt on the next one; `backward` walks it once in
reverse. All storage is float64.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's shape rule."""


class NumericError(ArithmeticError):
    """A value or gradient left the finite float64 domain."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, pseudo-labels)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus an optional position in the recorded graph.

    Leaves (parameters, constants) carry no inputs; tensors produced by ops
    keep references to their inputs and the closure that maps an output
    gradient to input gradients.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_inputs", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._inputs = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Row-major flat view of the payload."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only where the op is scale-by-constant
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def detach(self):
        return detach(self)


def _make(op: str, out_data, inputs, vjp):
    arr = np.asarray(out_data, dtype=np.float64)
    # a single reduction: any nan/inf entry makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise NumericError(f"op '{op}' produced non-finite values")
    out = Tensor(arr)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._vjp = vjp
    return out


def _need_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"op '{op}': shape {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"op 'matmul': shape {a.data.shape} vs {b.data.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _make("exp", out_data, (x,), lambda g: (g * out_data,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("op 'log': non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    return _make("tanh", out_data, (x,), lambda g: (g * (1.0 - out_data * out_data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def negate(x: Tensor) -> Tensor:
    return _make("negate", -x.data, (x,), lambda g: (-g,))


def reduce_sum(x: Tensor) -> Tensor:
    return _make("sum", x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("op 'mean': empty tensor")
    return _make(
        "mean", x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),)
    )


def concat_last(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("op 'concat-last-axis': no inputs")
    if any(p.data.ndim != 2 for p in parts) or len({p.data.shape[0] for p in parts}) != 1:
        raise ShapeError(
            "op 'concat-last-axis': need 2-d inputs with equal row counts, got "
            + str([p.data.shape for p in parts])
        )
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(widths)))

    return _make("concat-last-axis", np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def split_last(x: Tensor, index: int):
    """Split columns into x[:, :index] and x[:, index:]."""
    if x.data.ndim != 2 or not 0 < index < x.data.shape[1]:
        raise ShapeError(f"op 'split-last-axis': shape {x.data.shape}, index {index}")
    w = x.data.shape[1]

    def vjp_left(g):
        full = np.zeros_like(x.data)
        full[:, :index] = g
        return (full,)

    def vjp_right(g):
        full = np.zeros_like(x.data)
        full[:, index:] = g
        return (full,)

    left = _make("split-last-axis", x.data[:, :index].copy(), (x,), vjp_left)
    right = _make("split-last-axis", x.data[:, index:].copy(), (x,), vjp_right)
    del w
    return left, right


def broadcast_add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a [1, m] row vector to every row of a [n, m] matrix."""
    if x.data.ndim != 2 or row.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"op 'broadcast-add-row': shape {x.data.shape} vs {row.data.shape}")
    return _make(
        "broadcast-add-row",
        x.data + row.data,
        (x, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale-by-constant", x.data * c, (x,), lambda g: (g * c,))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax; a 1-d input is treated as a single row."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"op 'log_softmax': shape {x.data.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    out_data = x.data - lse

    def vjp(g):
        return (g - np.exp(out_data) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out_data, (x,), vjp)


def gather_class(x: Tensor, indices) -> Tensor:
    """Pick x[i, indices[i]] per row, producing a 1-d tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"op 'gather-class': shape {x.data.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise ShapeError("op 'gather-class': index out of range")
    rows = np.arange(x.data.shape[0])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _make("gather-class", x.data[rows, idx].copy(), (x,), vjp)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path to x or its ancestors."""
    return Tensor(x.data, requires_grad=False)


OP_REGISTRY = {
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "negate": negate,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "concat-last-axis": concat_last,
    "split-last-axis": split_last,
    "broadcast-add-row": broadcast_add_row,
    "scale-by-constant": scale,
    "log_softmax": log_softmax,
    "gather-class": gather_class,
}


def forward_op(name: str, inputs, **params):
    """Dispatch an op by kind name. `inputs` is a list of tensors."""
    try:
        fn = OP_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown op kind {name!r}") from None
    if name == "concat-last-axis":
        return fn(inputs, **params)
    return fn(*inputs, **params)


def _topo_order(root: Tensor):
    order = []
    seen = set()
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
        for parent in node._inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params) -> dict:
    """Reverse sweep from a scalar loss.

    Returns a map from each requested parameter tensor to its gradient
    tensor; parameters unreachable from the loss (e.g. behind a detach)
    get exact zeros.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for inp, gi in zip(node._inputs, node._vjp(g)):
            if gi is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = Tensor(np.zeros_like(p.data)) if g is None else Tensor(np.array(g, copy=True))
    return out


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor of x's shape to a scalar tensor. Error metric per
    coordinate: |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    base = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(base)
    if out.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.data.shape}")
    analytic = backward(out, [base])[base].data.reshape(-1)

    def probe(flat_values):
        val = f(Tensor(flat_values.reshape(x.data.shape))).item()
        if not np.isfinite(val):
            raise NumericError("grad_check: non-finite value at probe point")
        return val

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = probe(bumped)
        bumped[i] = flat[i] - step
        lo = probe(bumped)
        numeric = (hi - lo) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
