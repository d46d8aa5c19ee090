"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure linking it to its
parents. Operations (see functional.py) build the graph as they run; calling
``backward`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """An operation received operands whose shapes cannot be combined."""


class ConfigError(ValueError):
    """A configuration value is out of range, unknown, or inconsistent."""


class UsageError(RuntimeError):
    """An API was called in a way that has no defined meaning."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def set_debug_checks(flag: bool) -> None:
    """Toggle per-op finite checks on every forward result (slow; off by default)."""
    global _debug_checks
    _debug_checks = bool(flag)


def debug_checks_enabled() -> bool:
    return _debug_checks


class FlopCounter:
    """Context manager that accumulates the declared cost of every op run inside it.

    Costs follow the 2-ops-per-multiply-accumulate convention; elementwise and
    pooling ops count one per element touched; pure data movement is free.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _flop_stack.append(self)
        return self

    def __exit__(self, *exc):
        _flop_stack.remove(self)
        return False

    def add(self, n: int) -> None:
        self.total += int(n)


_flop_stack: list[FlopCounter] = []


def record_flops(n: int) -> None:
    if _flop_stack:
        for counter in _flop_stack:
            counter.add(n)


class Tensor:
    """An ndarray with an optional gradient and a link into the op graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor, got shape %s"
                             % (self.shape,))
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, parameters=None) -> None:
        ComputationGraph(self).backward(parameters)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # Light operator sugar; the full op set lives in functional.py.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, float(other))
        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data: np.ndarray, parents: tuple, backward_fn, op: str,
            cost: int = 0) -> Tensor:
    """Wrap an op result, recording cost and (when enabled) the backward link."""
    record_flops(cost)
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericFault(f"non-finite values produced by op {op!r}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, op=op, parents=parents,
                      backward_fn=backward_fn)
    return Tensor(out_data, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class ComputationGraph:
    """Reverse topological view of every tensor reachable from a root.

    The node list is produced by an iterative depth-first postorder, so each
    tensor appears after all of its parents; reversing it gives a valid
    gradient propagation order in which every node is visited exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        self.nodes = order

    def backward(self, parameters=None) -> None:
        """Accumulate d root / d leaf into every reachable leaf's ``.grad``.

        ``parameters``, when given, additionally receive a zero gradient if
        the graph never reaches them (e.g. a branch multiplied away).
        """
        root = self.root
        if root.data.ndim != 0:
            raise UsageError("backward requires a scalar root, got shape %s"
                             % (root.shape,))
        grads: dict[int, np.ndarray] = {
            id(root): np.ones((), dtype=root.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
        if parameters is not None:
            for p in parameters:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
