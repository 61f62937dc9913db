"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every primitive application as a node.  Leaves are
either parameters, data inputs or constants; :func:`backward` walks the node
list once in reverse and returns gradients for the requested leaves (or any
intermediate node).  Gradients are available with respect to inputs as well
as parameters, which is what the attacks need.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "Tensor",
    "Graph",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "gradient_reversal",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(ValueError):
    """Misuse of the tape: non-scalar loss, foreign node, mixed graphs."""


class _Node:
    __slots__ = ("op", "inputs", "backward", "requires_grad", "kind", "shape")

    def __init__(self, op, inputs, backward_fn, requires_grad, kind, shape):
        self.op = op
        self.inputs = inputs
        self.backward = backward_fn
        self.requires_grad = requires_grad
        self.kind = kind
        self.shape = shape


class Graph:
    """Append-only tape of primitive applications.

    ``track_params=False`` registers parameters as constants, so an attack
    loop only pays for gradients with respect to its input.
    """

    def __init__(self, track_params: bool = True):
        self.nodes: list[_Node] = []
        self.track_params = track_params
        self._param_cache: dict[int, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, array, kind, requires_grad) -> Tensor:
        data = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value in {kind} leaf")
        self.nodes.append(_Node(kind, (), None, requires_grad, kind, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def input(self, array, requires_grad: bool = True) -> Tensor:
        return self._leaf(array, "input", requires_grad)

    def constant(self, array) -> Tensor:
        return self._leaf(array, "const", False)

    def param(self, array: np.ndarray) -> Tensor:
        # One leaf per array object, so reuse across forwards accumulates.
        key = id(array)
        t = self._param_cache.get(key)
        if t is None or t.data is not array:
            if self.track_params:
                self.nodes.append(_Node("param", (), None, True, "param", array.shape))
                t = Tensor(array, self, len(self.nodes) - 1)
            else:
                t = self._leaf(array, "const", False)
            self._param_cache[key] = t
        return t


class Tensor:
    """A float64 array bound to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, graph: Graph, node: int):
        self.data = data
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return apply_primitive("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    def __pow__(self, k):
        return apply_primitive("pow", [self], k=int(k))

    @property
    def T(self):
        return apply_primitive("transpose", [self])


# --------------------------------------------------------------------------
# primitives: each returns (output, backward) where backward maps the output
# gradient to a tuple with one entry (array or None) per input.


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add(a, b):
    _broadcast(a, b, "add")
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast(a, b, "sub")
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast(a, b, "mul")
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(a, c):
    return a * c, lambda g: (g * c,)


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a, floor=None):
    if floor is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a), lambda g: (g / a,)
    live = a > floor
    safe = np.where(live, a, floor)
    return np.log(safe), lambda g: (np.where(live, g / safe, 0.0),)


def _sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a)
    # subgradient 0 at the origin keeps norms of zero vectors differentiable
    pos = out > 0
    denom = np.where(pos, 2.0 * out, 1.0)
    return out, lambda g: (np.where(pos, g / denom, 0.0),)


def _square(a):
    return a * a, lambda g: (2.0 * a * g,)


def _pow(a, k):
    if k < 1:
        raise ShapeError("pow: exponent must be a positive integer")
    out = a**k
    return out, lambda g: (g * k * a ** (k - 1),)


def _reduce_backward(shape, axis, scale):
    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape).copy(),)

    return back


def _sum(a, axis=None):
    return np.asarray(a.sum(axis=axis)), _reduce_backward(a.shape, axis, 1.0)


def _mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return np.asarray(a.mean(axis=axis)), _reduce_backward(a.shape, axis, 1.0 / n)


def _transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return a.T, lambda g: (g.T,)


def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _softmax(a):
    if a.ndim != 2:
        raise ShapeError(f"softmax expects 2-D logits, got {a.shape}")
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return p, back


def _label_vector(labels, n, op):
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (n,):
        raise ShapeError(f"{op}: {y.shape[0] if y.ndim else 1} labels for {n} rows")
    return y


def _softmax_cross_entropy(logits, labels):
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        squeeze = True
    else:
        squeeze = False
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.shape
    y = _label_vector(labels, n, "softmax_cross_entropy").astype(np.int64)
    if np.any(y < 0) or np.any(y >= c):
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, y]).mean())

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        p *= g / n
        return (p.reshape(-1) if squeeze else p, None)

    return loss, back


_BCE_EPS = 1e-12


def _binary_cross_entropy(prob, labels):
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), prob.shape)
    p = np.clip(prob, _BCE_EPS, 1.0 - _BCE_EPS)
    n = prob.size
    loss = np.asarray(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())
    inside = (prob > _BCE_EPS) & (prob < 1.0 - _BCE_EPS)

    def back(g):
        return (np.where(inside, g * (p - y) / (p * (1.0 - p)) / n, 0.0), None)

    return loss, back


def _bce_with_logits(z, labels):
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), z.shape)
    n = z.size
    # softplus(z) - y z, written to avoid overflow for large |z|
    loss = np.asarray((np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean())

    def back(g):
        s, _ = _sigmoid(z)
        return (g * (s - y) / n, None)

    return loss, back


def _concat_rows(*parts):
    if not parts:
        raise ShapeError("concat_rows needs at least one input")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.ndim == 0 or p.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shape {p.shape[1:]} != {tail}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate(parts, axis=0)
    return out, lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))


def _slice_rows(a, start, stop):
    if a.ndim == 0 or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows [{start}:{stop}] of {a.shape}")

    def back(g):
        full = np.zeros_like(a)
        full[start:stop] = g
        return (full,)

    return a[start:stop], back


def _grad_reverse(a, lam):
    if not lam > 0:
        raise ValueError("gradient reversal needs lambda > 0")
    return a, lambda g: (-lam * g,)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scale": _scale,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "square": _square,
    "pow": _pow,
    "sum": _sum,
    "mean": _mean,
    "transpose": _transpose,
    "reshape": _reshape,
    "softmax": _softmax,
    "softmax_cross_entropy": _softmax_cross_entropy,
    "binary_cross_entropy": _binary_cross_entropy,
    "bce_with_logits": _bce_with_logits,
    "concat_rows": _concat_rows,
    "slice_rows": _slice_rows,
    "grad_reverse": _grad_reverse,
}

# trailing positional inputs that are label arrays, never differentiated
_LABEL_INPUTS = {"softmax_cross_entropy": 1, "binary_cross_entropy": 1, "bce_with_logits": 1}


def apply_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate ``op`` on ``inputs`` and record it on their shared graph.

    Non-tensor operands become constant leaves.  When no operand carries a
    graph a fresh one is started, so plain arrays can be passed directly.
    """
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise KeyError(f"unknown primitive {op!r}")
    n_labels = _LABEL_INPUTS.get(op, 0)
    tensor_part = list(inputs[: len(inputs) - n_labels])
    labels = list(inputs[len(inputs) - n_labels :])

    graph = None
    for x in tensor_part:
        if isinstance(x, Tensor):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise GraphError(f"{op}: operands live on different graphs")
    if graph is None:
        graph = Graph()
    tensors = [x if isinstance(x, Tensor) else graph.constant(x) for x in tensor_part]
    labels = [x.data if isinstance(x, Tensor) else x for x in labels]

    out, back = fn(*(t.data for t in tensors), *labels, **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    ids = tuple(t.node for t in tensors)
    nodes = graph.nodes
    requires = any(nodes[i].requires_grad for i in ids)
    nodes.append(_Node(op, ids, back, requires, "op", out.shape))
    return Tensor(out, graph, len(nodes) - 1)


def gradient_reversal(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; scales the incoming gradient by ``-lam`` on the way back."""
    return apply_primitive("grad_reverse", [x], lam=float(lam))


def backward(loss: Tensor, wrt: Sequence[Tensor | int]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    Nodes the loss does not depend on get zero arrays of matching shape.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    graph = loss.graph
    nodes = graph.nodes
    ids = []
    for w in wrt:
        if isinstance(w, Tensor):
            if w.graph is not graph:
                raise GraphError("requested node belongs to another graph")
            ids.append(w.node)
        else:
            i = int(w)
            if not 0 <= i < len(nodes):
                raise GraphError(f"node id {i} is not in this graph")
            ids.append(i)

    wanted = set(ids)
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for i in range(loss.node, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.backward is None or not node.requires_grad:
            if i not in wanted:
                del grads[i]
            continue
        in_grads = node.backward(g)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None or not (nodes[j].requires_grad or j in wanted):
                continue
            prev = grads.get(j)
            grads[j] = gj if prev is None else prev + gj
        if i not in wanted:
            del grads[i]

    out = []
    for i in ids:
        g = grads.get(i)
        if g is None:
            g = np.zeros(nodes[i].shape)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at node {i}")
        out.append(np.asarray(g, dtype=np.float64).reshape(nodes[i].shape))
    return out


# functional spellings of the primitives used throughout the package


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(a, c: float):
    return apply_primitive("scale", [a], c=float(c))


def relu(a):
    return apply_primitive("relu", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a, floor: float | None = None):
    return apply_primitive("log", [a], floor=floor)


def sqrt(a):
    return apply_primitive("sqrt", [a])


def square(a):
    return apply_primitive("square", [a])


def power(a, k: int):
    return apply_primitive("pow", [a], k=int(k))


def sum_(a, axis: int | None = None):
    return apply_primitive("sum", [a], axis=axis)


def mean(a, axis: int | None = None):
    return apply_primitive("mean", [a], axis=axis)


def transpose(a):
    return apply_primitive("transpose", [a])


def reshape(a, shape):
    return apply_primitive("reshape", [a], shape=tuple(shape))


def softmax(a):
    return apply_primitive("softmax", [a])


def softmax_cross_entropy(logits, labels):
    return apply_primitive("softmax_cross_entropy", [logits, labels])


def binary_cross_entropy(prob, labels):
    return apply_primitive("binary_cross_entropy", [prob, labels])


def bce_with_logits(logits, labels):
    return apply_primitive("bce_with_logits", [logits, labels])


def concat_rows(parts):
    return apply_primitive("concat_rows", list(parts))


def slice_rows(a, start: int, stop: int):
    return apply_primitive("slice_rows", [a], start=int(start), stop=int(stop))
