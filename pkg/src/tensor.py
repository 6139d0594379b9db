"""Dense f64 tensors with tape-based reverse-mode differentiation.

A `Graph` is an append-only tape. Operations executed while a graph is active
(``with Graph() as g:``) append a node holding the op kind, parent node ids and
a closure over the saved forward values. `Graph.backward` sweeps the tape in
reverse node-id order, so gradient accumulation is bit-reproducible.

Tensors that are not graph nodes (constants, inputs nobody asked gradients
for) flow through the same functions without being recorded.
"""

import logging
from collections.abc import Callable, Sequence
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, GraphError, ShapeError

logger = logging.getLogger(__name__)

Array = np.ndarray
Vjp = Callable[[Array], tuple[Array | None, ...]]

_ACTIVE: ContextVar["Graph | None"] = ContextVar("active_graph", default=None)


class OpKind(Enum):
    LEAF = "leaf"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    NEG = "neg"
    RELU = "relu"
    SIGMOID = "sigmoid"
    MATMUL = "matmul"
    CONV2D = "conv2d"
    BATCH_NORM = "batch_norm"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    SUM = "sum"
    MEAN = "mean"
    RESHAPE = "reshape"
    ROWSCALE = "rowscale"
    BIAS_ADD = "bias_add"
    SPATIAL_MEAN = "spatial_mean"
    TAKE = "take"
    STACK = "stack"


BINARY_KINDS = frozenset({OpKind.ADD, OpKind.SUB, OpKind.MUL})
UNARY_KINDS = frozenset({OpKind.NEG, OpKind.RELU, OpKind.SIGMOID})


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Node:
    kind: OpKind
    parents: tuple[int | None, ...]
    shape: tuple[int, ...]
    vjp: Vjp | None = field(default=None, repr=False)


class Tensor:
    """A dense f64 array, optionally a node of the active graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, node_id: int | None = None, graph: "Graph | None" = None):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> Array:
        return self.data.ravel()

    @property
    def tracked(self) -> bool:
        return self.graph is not None and self.graph is _ACTIVE.get()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients:
    """Per-node gradient accumulators produced by one backward sweep."""

    def __init__(self, graph: "Graph", grads: list[Array | None]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, key: "Tensor | int") -> Array:
        node_id = key.node_id if isinstance(key, Tensor) else key
        if node_id is None:
            raise GraphError("tensor is not a node of this graph")
        grad = self._grads[node_id] if node_id < len(self._grads) else None
        if grad is None:
            return np.zeros(self._graph.nodes[node_id].shape)
        return grad

    def __contains__(self, key: "Tensor | int") -> bool:
        node_id = key.node_id if isinstance(key, Tensor) else key
        return node_id is not None and node_id < len(self._grads) and self._grads[node_id] is not None


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float64)
        node_id = self._append(Node(OpKind.LEAF, (), arr.shape))
        return Tensor(arr, node_id, self)

    def _append(self, node: Node) -> int:
        for parent in node.parents:
            if parent is not None and parent >= len(self.nodes):
                raise GraphError(f"parent {parent} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, root: Tensor) -> Gradients:
        if root.graph is not self or root.node_id is None:
            raise GraphError("backward root does not belong to this graph")
        if root.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.shape}")

        grads: list[Array | None] = [None] * (root.node_id + 1)
        grads[root.node_id] = np.ones(root.shape)
        for node_id in range(root.node_id, -1, -1):
            grad = grads[node_id]
            node = self.nodes[node_id]
            if grad is None or node.vjp is None:
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(grad), strict=True):
                if parent is None or parent_grad is None:
                    continue
                grads[parent] = parent_grad if grads[parent] is None else grads[parent] + parent_grad
        return Gradients(self, grads)


def active_graph() -> Graph | None:
    return _ACTIVE.get()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(kind: OpKind, inputs: Sequence[Tensor], value: Array, vjp: Vjp) -> Tensor:
    graph = _ACTIVE.get()
    if graph is None:
        return Tensor(value)
    parents = tuple(t.node_id if t.graph is graph else None for t in inputs)
    if all(p is None for p in parents):
        return Tensor(value)
    node_id = graph._append(Node(kind, parents, value.shape, vjp))
    return Tensor(value, node_id, graph)


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# elementwise


def elementwise(kind: OpKind, a, b=None) -> Tensor:
    a = as_tensor(a)
    if kind in UNARY_KINDS:
        if b is not None:
            raise DomainError(f"{kind.value} takes one operand")
        return _unary(kind, a)
    if kind not in BINARY_KINDS:
        raise DomainError(f"{kind.value} is not an elementwise op")
    b = as_tensor(b)
    if not (a.shape == b.shape or _is_scalar(a) or _is_scalar(b)):
        raise ShapeError.mismatch(kind.value, a.shape, b.shape)
    x, y = a.data, b.data

    match kind:
        case OpKind.ADD:
            # a zero operand returns the other one unchanged, signed zeros included
            value = np.where(y == 0.0, x, np.where(x == 0.0, y, x + y))

            def vjp(g):
                return _reduce_to(g, x.shape), _reduce_to(g, y.shape)

        case OpKind.SUB:
            value = x - y

            def vjp(g):
                return _reduce_to(g, x.shape), _reduce_to(-g, y.shape)

        case OpKind.MUL:
            value = x * y

            def vjp(g):
                return _reduce_to(g * y, x.shape), _reduce_to(g * x, y.shape)

    if _is_scalar(a) and _is_scalar(b):
        value = value.reshape(a.shape if a.ndim >= b.ndim else b.shape)
    return _record(kind, (a, b), value, vjp)


def sigmoid_array(z: Array) -> Array:
    # exp(-|z|) never overflows; the two branches are the z>=0 and z<0 forms
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unary(kind: OpKind, a: Tensor) -> Tensor:
    x = a.data
    match kind:
        case OpKind.NEG:
            value = -x

            def vjp(g):
                return (-g,)

        case OpKind.RELU:
            value = np.where(x > 0, x, 0.0)

            def vjp(g):
                return (np.where(x > 0, g, 0.0),)

        case OpKind.SIGMOID:
            value = sigmoid_array(x)

            def vjp(g):
                return (g * value * (1.0 - value),)

    return _record(kind, (a,), value, vjp)


def add(a, b) -> Tensor:
    return elementwise(OpKind.ADD, a, b)


def sub(a, b) -> Tensor:
    return elementwise(OpKind.SUB, a, b)


def mul(a, b) -> Tensor:
    return elementwise(OpKind.MUL, a, b)


def neg(a) -> Tensor:
    return elementwise(OpKind.NEG, a)


def relu(a) -> Tensor:
    return elementwise(OpKind.RELU, a)


def sigmoid(a) -> Tensor:
    return elementwise(OpKind.SIGMOID, a)


# linear maps


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError.mismatch("matmul", a.shape, b.shape)
    x, y = a.data, b.data

    def vjp(g):
        return g @ y.T, x.T @ g

    return _record(OpKind.MATMUL, (a, b), x @ y, vjp)


def conv2d(x, w, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation of an N×C×H×W batch with F×C×3×3 filters."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError.mismatch("conv2d", x.shape, w.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if pad not in (0, 1) or stride not in (1, 2):
        raise DomainError(f"conv2d: unsupported pad={pad} stride={stride}")

    n, c, h, wd = x.shape
    h_out = (h + 2 * pad - 3) // stride + 1
    w_out = (wd + 2 * pad - 3) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for a 3x3 kernel")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    kernel = w.data
    value = np.einsum("nchwij,fcij->nfhw", windows, kernel, optimize=True)

    def vjp(g):
        grad_w = np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True)
        grad_cols = np.einsum("fcij,nfhw->nchwij", kernel, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    grad_cols[..., i, j]
                )
        return grad_padded[:, :, pad : pad + h, pad : pad + wd], grad_w

    return _record(OpKind.CONV2D, (x, w), value, vjp)


def bias_add(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError.mismatch("bias_add", x.shape, b.shape)

    def vjp(g):
        return g, g.sum(axis=0)

    return _record(OpKind.BIAS_ADD, (x, b), x.data + b.data, vjp)


# normalisation


@dataclass
class RunningStats:
    mean: Array
    var: Array
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def update(self, mean: Array, var: Array) -> None:
        self.mean = (1.0 - self.momentum) * self.mean + self.momentum * mean
        self.var = (1.0 - self.momentum) * self.var + self.momentum * var


BN_EPS = 1e-5


def _channel_layout(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    match x.ndim:
        case 2:
            return (0,), (1, x.shape[1])
        case 4:
            return (0, 2, 3), (1, x.shape[1], 1, 1)
    raise ShapeError(f"batch_norm expects a 2-d or 4-d batch, got shape {x.shape}")


def batch_norm(x, gamma, beta, stats: RunningStats, mode: Mode, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation.

    Train mode normalises with batch statistics and folds them into ``stats``
    (unbiased variance); eval mode reads ``stats`` only. The variance is
    guarded as ``max(var, eps)``, so a zero-variance batch never divides by
    zero and unit running variance is an exact identity.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes, bshape = _channel_layout(x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError.mismatch("batch_norm", x.shape, gamma.shape)

    if mode is Mode.TRAIN:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // channels
        stats.update(mean, var * count / (count - 1) if count > 1 else var)
    else:
        mean, var = stats.mean, stats.var

    denom = np.sqrt(np.maximum(var, eps)).reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) / denom
    g_b = gamma.data.reshape(bshape)
    value = g_b * xhat + beta.data.reshape(bshape)
    var_active = (var > eps).reshape(bshape)
    train = mode is Mode.TRAIN

    def vjp(g):
        grad_gamma = np.sum(g * xhat, axis=axes)
        grad_beta = np.sum(g, axis=axes)
        dxhat = g * g_b
        if train:
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            grad_x = (dxhat - m1 - np.where(var_active, xhat * m2, 0.0)) / denom
        else:
            grad_x = dxhat / denom
        return grad_x, grad_gamma, grad_beta

    return _record(OpKind.BATCH_NORM, (x, gamma, beta), value, vjp)


# losses and reductions


def log_softmax_array(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_array(logits: Array) -> Array:
    return np.exp(log_softmax_array(logits))


def _check_labels(labels, n: int, k: int) -> Array:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def per_sample_cross_entropy(logits: Array, labels) -> Array:
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    return -log_softmax_array(logits)[np.arange(n), labels]


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch mean of −log softmax at the label, computed with max-subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N×K logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    log_p = log_softmax_array(logits.data)
    value = np.asarray(-log_p[np.arange(n), labels].mean())
    probs = np.exp(log_p)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _record(OpKind.SOFTMAX_CROSS_ENTROPY, (logits,), value, vjp)


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(OpKind.SUM, (x,), np.asarray(x.data.sum()), vjp)


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, size = x.shape, x.data.size

    def vjp(g):
        return (np.full(shape, g / size),)

    return _record(OpKind.MEAN, (x,), np.asarray(x.data.mean()), vjp)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return _record(OpKind.RESHAPE, (x,), x.data.reshape(shape), vjp)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def rowscale(x, s) -> Tensor:
    """Scale sample i of a batch by s[i]."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != (x.shape[0],):
        raise ShapeError.mismatch("rowscale", x.shape, s.shape)
    bshape = (x.shape[0],) + (1,) * (x.ndim - 1)
    axes = tuple(range(1, x.ndim))
    xs, ss = x.data, s.data.reshape(bshape)

    def vjp(g):
        return g * ss, np.sum(g * xs, axis=axes)

    return _record(OpKind.ROWSCALE, (x, s), xs * ss, vjp)


def spatial_mean(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"spatial_mean expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _record(OpKind.SPATIAL_MEAN, (x,), x.data.mean(axis=(2, 3)), vjp)


def take(x, index: int) -> Tensor:
    """Component ``index`` of the flattened tensor, as a scalar."""
    x = as_tensor(x)
    shape = x.shape
    flat_index = int(index)

    def vjp(g):
        grad = np.zeros(int(np.prod(shape)))
        grad[flat_index] = g
        return (grad.reshape(shape),)

    return _record(OpKind.TAKE, (x,), np.asarray(x.data.ravel()[flat_index]), vjp)


def stack(scalars: Sequence) -> Tensor:
    items = [as_tensor(s) for s in scalars]
    for item in items:
        if item.data.size != 1:
            raise ShapeError(f"stack takes scalars, got shape {item.shape}")
    shapes = [item.shape for item in items]

    def vjp(g):
        return tuple(g[i].reshape(shape) for i, shape in enumerate(shapes))

    value = np.array([item.data.reshape(()) for item in items], dtype=np.float64)
    return _record(OpKind.STACK, items, value, vjp)


# finite differences


def numerical_gradient(fn: Callable[[Array], float], x: Array, step: float = 1e-6) -> Array:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, grad_flat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        upper = fn(x)
        flat[i] = saved - step
        lower = fn(x)
        flat[i] = saved
        grad_flat[i] = (upper - lower) / (2.0 * step)
    return grad


def numerical_jacobian(fn: Callable[[Array], Array], x: Array, step: float = 1e-6) -> Array:
    """Central finite-difference Jacobian, rows indexed by output component."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    columns = []
    for i in range(x.size):
        upper, lower = x.copy(), x.copy()
        upper[i] += step
        lower[i] -= step
        columns.append((np.asarray(fn(upper)).reshape(-1) - np.asarray(fn(lower)).reshape(-1)) / (2.0 * step))
    return np.stack(columns, axis=1)
