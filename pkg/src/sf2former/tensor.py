"""Dense tensors with tape-based reverse-mode differentiation.

Ops executed inside an active :class:`Graph` are recorded in execution order
together with a closure that maps the output gradient to input gradients.
Outside a graph the same ops run as plain numpy computations.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphStateError(RuntimeError):
    pass


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A named trainable tensor carrying its own momentum buffer."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# graph recording
# ---------------------------------------------------------------------------

_local = threading.local()


def current_graph() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Ordered record of the ops executed while the graph is active.

    Use as a context manager around a single forward pass, then call
    :meth:`backward` once on the scalar loss.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if not any(t.requires_grad for t in inputs):
            return
        if self.consumed:
            raise GraphStateError("cannot record into a graph that has already been differentiated")
        output.requires_grad = True
        self.nodes.append(_Node(output, tuple(inputs), backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        backward(self, loss, params)


def _accumulate(grads: dict, tensor: Tensor, g) -> None:
    if g is None or not tensor.requires_grad:
        return
    g = np.asarray(g)
    if g.shape != tensor.shape:
        g = unbroadcast(g, tensor.shape)
    key = id(tensor)
    prev = grads.get(key)
    grads[key] = g.astype(tensor.dtype, copy=True) if prev is None else prev + g


def backward(graph: Graph, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf tensor reached from ``loss``.

    Tensors listed in ``params`` that the loss does not depend on receive zero
    gradients.
    """
    if graph.consumed:
        raise GraphStateError("backward called twice on the same graph; record a new forward pass")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    graph.consumed = True

    produced = {id(node.output) for node in graph.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        if len(node.inputs) == 1 and not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for t, gi in zip(node.inputs, in_grads):
            _accumulate(grads, t, gi)
            if id(t) not in produced:
                leaves[id(t)] = t
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss

    for key, t in leaves.items():
        t.grad = grads.get(key, np.zeros_like(t.data))
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _out(data: np.ndarray, op: str) -> Tensor:
    check_finite(data, op)
    return Tensor(data)


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    graph = current_graph()
    if graph is not None:
        graph.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = _out(a.data + b.data, "add")
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = _out(a.data - b.data, "sub")
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = _out(ad * bd, "mul")
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    out = _out(a.data * a.dtype.type(factor), "scale")
    return _record(out, (a,), lambda g: g * a.dtype.type(factor))


def _gemm_rows(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for 2-D ``x`` such that each output row is independent of the row count.

    OpenBLAS handles the last ``m % 4`` rows (and single rows) with different
    kernels, so the same input row can round differently depending on how
    many rows share the call. Padding to a multiple of four keeps per-sample
    outputs bitwise identical across batch sizes.
    """
    m = x.shape[0]
    pad = -m % 4
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]), x.dtype)])
        return (x @ w)[:m]
    return x @ w


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    try:
        prod = _gemm_rows(ad, bd) if ad.ndim == 2 and bd.ndim == 2 else np.matmul(ad, bd)
        out = _out(prod, "matmul")
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            # fold the batch axes into rows: one GEMM instead of a batched product and a sum
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis, as a single recorded op."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {xd.shape}, weight {wd.shape}")
    flat = xd.reshape(-1, xd.shape[-1])
    y = _gemm_rows(flat, wd)
    if bias is not None:
        y += bias.data
    out = _out(y.reshape(xd.shape[:-1] + (wd.shape[1],)), "linear")

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: g.reshape(old))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: g.transpose(inverse))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, tuple(shape)).copy())
    return _record(out, (a,), lambda g: g)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    src_shape = a.shape
    out = Tensor(np.take(a.data, index, axis=axis))

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        sl = [slice(None)] * len(src_shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return full

    return _record(out, (a,), backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    src_shape = a.shape
    out = Tensor(np.asarray(a.data.sum(axis=axis)))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src_shape).copy()

    return _record(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    src_shape = a.shape
    count = a.data.size if axis is None else int(np.prod([src_shape[i] for i in np.atleast_1d(axis)]))
    out = Tensor(np.asarray(a.data.mean(axis=axis)))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / a.dtype.type(count), src_shape).copy()

    return _record(out, (a,), backward)
