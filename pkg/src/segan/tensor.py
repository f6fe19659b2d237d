"""Dense tensors with a define-by-run graph and reverse-mode differentiation.

Every forward operation records, on its output, the input tensors and a
closure that maps the output gradient to input gradients.  ``backward``
walks the recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_state = {"dtype": np.float32, "grad_enabled": True, "debug": False}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (used for gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def debug_mode():
    """Check every op output for NaN/Inf."""
    prev = _state["debug"]
    _state["debug"] = True
    try:
        yield
    finally:
        _state["debug"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """N-d array plus an optional gradient buffer.

    ``grad`` exists iff ``requires_grad``; leaves accumulate it across
    ``backward`` calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    # Arithmetic is limited to what the losses need: same-shape tensors or
    # python scalars.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result; attach graph edges only when some input needs a gradient."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def tensor_from(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False, dtype=None) -> Tensor:
    shape = [int(s) for s in shape]
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=dtype or default_dtype())
    expected = math.prod(shape)
    if arr.size != expected:
        raise ShapeError(f"shape {shape} expected {expected} values, got {arr.size}")
    return Tensor(arr.reshape(shape).copy(), requires_grad)


def as_tensor(arr, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(arr, dtype=dtype or default_dtype()), requires_grad)


@dataclass
class Graph:
    """Nodes reachable from an output, inputs always before their consumers."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order, seen = [], set()
        stack = [(output, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def records(self) -> list[tuple[str, list[int]]]:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        return [(n.op, [index[id(p)] for p in n._parents if id(p) in index]) for n in self.nodes]


def backward(loss: Tensor, graph: Graph | None = None, retain_graph: bool = False):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node._grad is None:
                node._grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node._grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic| + |numeric|)."""
    x.zero_grad()
    was = x.requires_grad
    x.requires_grad = True
    loss = fn(x)
    backward(loss)
    analytic = np.array(x.grad, dtype=np.float64).reshape(-1)
    x.zero_grad()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(x).item()
            flat[i] = orig - eps
            down = fn(x).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_node(a.data + np.asarray(b, dtype=a.dtype), [a], lambda g: (g,), "add_const")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    return make_node(a.data + b.data, [a, b], lambda g: (g, g), "add")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_node(a.data * a.dtype.type(k), [a], lambda g: (g * k,), "scale")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may have a single channel that broadcasts over ``a``'s channels."""
    if a.shape != b.shape:
        ok = (
            a.data.ndim == b.data.ndim >= 2
            and b.shape[1] == 1
            and a.shape[:1] == b.shape[:1]
            and a.shape[2:] == b.shape[2:]
        )
        if not ok:
            raise ShapeError(f"hadamard: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    broadcast = a.shape != b.shape

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if broadcast:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return make_node(a.data * b.data, [a, b], _backward, "hadamard")


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {list(t.shape)} does not match {list(ref)} outside the channel dim")
    sizes = [t.shape[1] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    if len(ref) == 4:
        # Join along the last memory axis so channels-last inputs stay channels-last.
        out = np.concatenate([t.data.transpose(0, 2, 3, 1) for t in ts], axis=3).transpose(0, 3, 1, 2)
    else:
        out = np.concatenate([t.data for t in ts], axis=1)
    return make_node(out, list(ts), _backward, "concat")


def channel(x: Tensor, k: int) -> Tensor:
    """Channel ``k`` of a 4-D tensor, kept as a 1-channel tensor."""
    def _backward(g):
        out = np.zeros_like(x.data)
        out[:, k:k + 1] = g
        return (out,)

    return make_node(x.data[:, k:k + 1], [x], _backward, "channel")


def mean_abs(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where the inputs are equal."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs: shapes {list(a.shape)} and {list(b.shape)} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).sum(dtype=np.float64) / n, dtype=a.dtype)

    def _backward(g):
        s = np.sign(diff) * (g / n)
        return (s if a.requires_grad else None, -s if b.requires_grad else None)

    return make_node(out, [a, b], _backward, "mean_abs")


def mean_of(scalars: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors."""
    if not scalars:
        raise ShapeError("mean_of needs at least one value")
    n = len(scalars)
    total = sum(float(s.data) for s in scalars) / n
    out = np.asarray(total, dtype=scalars[0].dtype)
    return make_node(out, list(scalars), lambda g: tuple(g / n for _ in range(n)), "mean_of")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), [x],
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) for a constant array ``w``; handy for probing gradients."""
    w = np.asarray(w, dtype=x.dtype)
    return make_node(np.asarray((x.data * w).sum(), dtype=x.dtype), [x], lambda g: (g * w,), "weighted_sum")
