"""Tensor values, graph nodes and the reverse-mode engine."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Training runs in float32; gradient checks switch to float64 so the
    finite-difference oracle is not dominated by rounding.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class Node:
    """A recorded differentiable op.

    ``backward`` maps the output gradient to one gradient per input
    (``None`` where an input needs none).  ``saved`` holds auxiliaries
    kept for inspection, e.g. pooling argmax or batch statistics.
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """An n-d float array plus the node that produced it (if any)."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node = node
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # arithmetic is defined in ops and attached there to avoid a cycle
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops

        return ops.index(self, index)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A named, trainable leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn, **saved) -> Tensor:
    """Wrap an op output, recording a node only when some input needs a gradient."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(data)
    node = Node(op, tuple(inputs), backward_fn, saved)
    return Tensor(data, requires_grad=True, node=node)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Propagate gradients from ``root`` to every tensor that requires one.

    Parameters accumulate into ``.grad``; intermediate tensors get their
    gradient assigned so callers (e.g. CAM methods) can read it.  Each
    node's closure is released afterwards, so a second call on the same
    graph raises :class:`GraphError`.
    """
    if not root.requires_grad:
        raise GraphError("backward() on a tensor that does not require grad")
    if root.node is not None and root.node.backward is None:
        raise GraphError("graph already consumed by a previous backward(); run forward again")
    if grad is None:
        if root.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {root.shape}")
        grad = np.ones_like(root.data)
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if isinstance(t, Parameter):
            t.grad = t.grad + g if t.grad is not None else g.copy()
        else:
            t.grad = g
        node = t.node
        if node is None:
            continue
        if node.backward is None:
            raise GraphError(f"graph already consumed at op {node.op!r}")
        in_grads = node.backward(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node.backward = None
