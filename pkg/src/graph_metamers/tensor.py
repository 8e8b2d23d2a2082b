"""Dense reverse-mode automatic differentiation over 2-D float64 arrays.

Every value is a 2-D ``numpy`` array (scalars are 1x1). Operations build a
graph of :class:`Tensor` nodes; :func:`backward` walks it in reverse
topological order and leaves ``grad`` on every node holding the derivative of
the (scalar) root with respect to that node.

Broadcasting is limited to what 2-D shapes allow: a row vector, column vector
or 1x1 operand may be stretched against a full matrix.

>>> x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
>>> backward(sq_norm(x))
>>> x.grad
array([[2., 4., 6.]])
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "power",
    "exp",
    "log",
    "relu",
    "elu",
    "leaky_relu",
    "sigmoid",
    "softmax_rows",
    "log_softmax_nll",
    "concat_cols",
    "sum",
    "mean",
    "sq_norm",
    "transpose",
    "gather",
    "ste",
    "stop_gradient",
    "OP_KINDS",
]


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the autodiff graph.

    Leaves are created directly; interior nodes come from the op functions.
    ``grad`` is populated by :func:`backward` and has the shape of ``value``.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf", parents=()):
        self.value = value if op != "leaf" else _as_matrix(value)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ConfigError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")
    parents = tuple(parents)
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _node(a.value @ b.value, "matmul", (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("hadamard", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, "hadamard", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise NumericError("div: division by zero")
    q = a.value / b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * q / b.value, b.shape))

    return _node(q, "div", (a, b), bw)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, c * g)

    return _node(c * a.value, "scale", (a,), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.T)

    return _node(a.value.T.copy(), "transpose", (a,), bw)


def concat_cols(*tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi])

    return _node(np.concatenate([t.value for t in ts], axis=1), "concat-cols", ts, bw)


def gather(table, index) -> Tensor:
    """Look up entries of a 1xK ``table`` at an integer index matrix."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if table.shape[0] != 1 or index.ndim != 2:
        raise DimensionError("gather: table must be 1xK and index 2-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[1]):
        raise DimensionError("gather: index out of range")

    def bw(g):
        if table.requires_grad:
            np.add.at(table.grad[0], index, g)

    return _node(table.value[0][index], "gather", (table,), bw)


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        val = np.array([[a.value.sum()]])
    else:
        val = a.value.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(val, "sum", (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def sq_norm(a) -> Tensor:
    """Squared Frobenius norm as a 1x1 tensor."""
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * g[0, 0] * a.value)

    return _node(np.array([[np.sum(a.value * a.value)]]), "sq-norm", (a,), bw)


# ---------------------------------------------------------------- pointwise


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    val = a.value**p

    def bw(g):
        _accumulate(a, g * p * a.value ** (p - 1))

    return _node(val, "power", (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.value)  # overflow is reported by _node as NumericError

    def bw(g):
        _accumulate(a, g * val)

    return _node(val, "exp", (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")

    def bw(g):
        _accumulate(a, g / a.value)

    return _node(np.log(a.value), "log", (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.value > 0

    def bw(g):
        _accumulate(a, g * active)

    return _node(np.where(active, a.value, 0.0), "relu", (a,), bw)


def elu(a, alpha: float = 1.0) -> Tensor:
    if alpha <= 0:
        raise ConfigError("elu alpha must be positive")
    a = as_tensor(a)
    pos = a.value > 0
    em1 = np.expm1(np.minimum(a.value, 0.0))

    def bw(g):
        _accumulate(a, g * np.where(pos, 1.0, alpha * (em1 + 1.0)))

    return _node(np.where(pos, a.value, alpha * em1), "elu", (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0

    def bw(g):
        _accumulate(a, g * np.where(pos, 1.0, slope))

    return _node(np.where(pos, a.value, slope * a.value), "leaky-relu", (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)

    def bw(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node(s, "sigmoid", (a,), bw)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(a, s * (g - np.sum(g * s, axis=1, keepdims=True)))

    return _node(s, "softmax-row", (a,), bw)


def log_softmax_nll(logits, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    rows = np.arange(n) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ConfigError("log_softmax_nll: empty mask")
    z = logits.value[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(rows.size), labels[rows]].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(rows.size), labels[rows]] -= 1.0
        full = np.zeros(logits.shape)
        full[rows] = d * (g[0, 0] / rows.size)
        _accumulate(logits, full)

    return _node(np.array([[loss]]), "log-softmax-nll", (logits,), bw)


# ---------------------------------------------------------------- gradient routing


def ste(soft, hard) -> Tensor:
    """Straight-through node: forward is ``hard``, gradient goes to ``soft`` as-is."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"ste: hard shape {hard.shape} != soft shape {soft.shape}")

    def bw(g):
        _accumulate(soft, g)

    return _node(hard.copy(), "ste-passthrough", (soft,), bw)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.copy())


OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "hadamard",
    "div",
    "scale",
    "transpose",
    "concat-cols",
    "gather",
    "sum",
    "sq-norm",
    "power",
    "exp",
    "log",
    "relu",
    "elu",
    "leaky-relu",
    "sigmoid",
    "softmax-row",
    "log-softmax-nll",
    "ste-passthrough",
)


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
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
    return order


def backward(root: Tensor) -> None:
    """Fill ``grad`` on every differentiable node reachable from ``root``.

    Gradients from a previous call are discarded, so repeated calls on a shared
    graph (one per output coordinate, say) do not accumulate.
    """
    if root.shape != (1, 1):
        raise ConfigError(f"backward needs a 1x1 root, got {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    for node in order:
        node.grad = np.zeros(node.shape)
    root.grad[0, 0] = 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
