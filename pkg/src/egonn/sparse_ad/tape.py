"""Reverse-mode tape, variables and parameters.

Operations record themselves on the innermost active :class:`Tape` of the
calling thread. Outside a tape nothing is recorded, which is the inference
path. Each thread has its own tape stack, so independent forward/backward
passes may run concurrently as long as they only read shared parameters.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Var:
    """A dense array that may participate in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar; implementations live in ``functional``
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __rmatmul__(self, other):
        from . import functional as F
        return F.matmul(other, self)

    def __getitem__(self, index):
        from . import functional as F
        return F.take(self, index)

    @property
    def T(self):
        from . import functional as F
        return F.transpose(self)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Var):
    """A named trainable leaf. Gradients accumulate into ``grad`` until zeroed."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Var, parents: Sequence, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed primitives; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Var, seed=None) -> None:
        backward(loss, tape=self, seed=seed)


def record(value, parents: Sequence, backward_fn: Callable) -> Var:
    """Wrap ``value`` as the output of a primitive.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    parent, shaped like that parent's value.
    """
    tape = active_tape()
    needs = tape is not None and any(isinstance(p, Var) and p.requires_grad for p in parents)
    out = Var(value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def backward(loss: Var, tape: Tape | None = None, seed=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``Parameter.grad``."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward() needs the tape the loss was recorded on")
    if seed is None:
        if loss.value.size != 1:
            raise ValueError("backward() requires a scalar loss")
        seed = np.ones_like(loss.value)
    if not loss.requires_grad:
        return
    loss.grad = np.asarray(seed, dtype=loss.value.dtype).reshape(loss.value.shape)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not isinstance(parent, Var) or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=parent.value.dtype, copy=True)
            else:
                parent.grad = (parent.grad + pg).astype(parent.value.dtype, copy=False)
        # intermediates are visited exactly once; free their gradient
        node.out.grad = None
    tape.nodes.clear()
