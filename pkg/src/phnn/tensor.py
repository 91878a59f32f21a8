"""Tensor value carrier and the reverse-mode tape.

Every differentiable op records a :class:`Node` on the active :class:`Tape`
when at least one of its inputs requires a gradient.  A tape is consumed by
exactly one call to :func:`backward`; a fresh tape is used per forward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import AlreadyConsumed, LengthMismatch, NonFinite, NotScalar

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.node: Optional[Node] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # operator sugar; the real definitions live in phnn.ops
    def __add__(self, other):
        from . import ops
        return ops.elementwise("add", self, other)

    def __radd__(self, other):
        from . import ops
        return ops.elementwise("add", self, other)

    def __sub__(self, other):
        from . import ops
        return ops.elementwise("sub", self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.elementwise("add", ops.elementwise("scale", self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        kind = "scale" if np.isscalar(other) else "mul"
        return ops.elementwise(kind, self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.elementwise("scale", self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _raise_not_scalar(t: Tensor):
    raise NotScalar(f"tensor of shape {t.shape} is not a single element")


def tensor_create(shape: Sequence[int], values, requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major value sequence."""
    dims = tuple(int(d) for d in shape)
    if not dims or any(d <= 0 for d in dims):
        raise LengthMismatch(f"invalid shape {dims}")
    flat = np.asarray(values, dtype=DTYPE).reshape(-1)
    if flat.size != int(np.prod(dims)):
        raise LengthMismatch(f"{flat.size} values for shape {dims}")
    if not np.all(np.isfinite(flat)):
        raise NonFinite("values contain NaN or Inf")
    return Tensor(flat.reshape(dims), requires_grad=requires_grad)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


def grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording a node when gradients are needed."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.requires_grad = needs
    out.grad = None
    out.node = None
    out.tape = None
    out.name = None
    if needs:
        tape = current_tape()
        if tape.consumed:
            raise AlreadyConsumed("cannot record onto a tape that was already back-propagated")
        node = Node(op, tuple(inputs), out, backward_fn)
        tape.nodes.append(node)
        out.node = node
        out.tape = tape
    return out


def backward(scalar: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(scalar)/d(leaf) into every reachable leaf's ``grad``."""
    if scalar.size != 1:
        raise NotScalar(f"backward needs a single-element tensor, got shape {scalar.shape}")
    if not scalar.requires_grad:
        return
    if scalar.node is None:
        scalar.grad = (scalar.grad if scalar.grad is not None else 0.0) + np.ones_like(scalar.data)
        return
    tape = tape if tape is not None else scalar.tape
    if tape is not scalar.tape:
        raise AlreadyConsumed("scalar was not produced on the given tape")
    if tape.consumed:
        raise AlreadyConsumed("this tape has already been back-propagated")
    tape.consumed = True

    pending: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        inputs = node.inputs
        # output <-> node is a reference cycle; drop the heavy parts eagerly
        node.inputs, node.backward_fn = (), None
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    for node in tape.nodes:
        node.inputs, node.backward_fn = (), None
    tape.nodes.clear()

    st = _state()
    if tape is st.default:
        st.default = Tape()
