"""Minimal deterministic reverse-mode autodiff: Tensor values plus a Tape of
recorded operations replayed in reverse. Single-threaded per tape; float32 by
default (float64 opt-in for finite-difference checks)."""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional float array, optionally tracked on the active Tape.

    `grad` is populated by Tape.backward and accumulates until cleared.
    `node_id` identifies the tensor within the tape that last touched it.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(values)
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        # np.asarray(order="C") keeps 0-d scalars 0-d, unlike ascontiguousarray
        self.values = np.asarray(values, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: output tensor, input tensors, backward rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_tape_stack = threading.local()


def active_tape():
    """The innermost Tape entered on this thread, or None."""
    stack = getattr(_tape_stack, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; execution order is a topological order
    by construction, so one reverse sweep propagates all gradients.

    Usage::

        with Tape() as tape:
            loss = ops.mse(pred, target)
        tape.backward(loss)

    Ops executed while no tape is active run forward-only (no recording),
    which is how eval passes and frozen-teacher forwards avoid autograd.
    A tape is confined to the thread that created it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._next_id = 0
        self._live: set[int] = set()  # id() of tensors gradients must reach

    def __enter__(self):
        stack = getattr(_tape_stack, "stack", None)
        if stack is None:
            stack = _tape_stack.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.stack.pop()
        return False

    def _assign_id(self, t: Tensor):
        if id(t) not in self._live:
            self._live.add(id(t))
            t.node_id = self._next_id
            self._next_id += 1

    def register(self, inputs) -> tuple | None:
        """Mark which inputs need gradients; None if the op can skip recording."""
        flags = []
        any_tracked = False
        for t in inputs:
            tracked = t.requires_grad or id(t) in self._live
            if tracked:
                self._assign_id(t)
                any_tracked = True
            flags.append(tracked)
        return tuple(flags) if any_tracked else None

    def record(self, output: Tensor, inputs, backward_fn):
        for t in inputs:
            if t.requires_grad:
                self._assign_id(t)
        self._assign_id(output)
        self.nodes.append(TapeNode(output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor):
        """Populate grads of every tracked tensor reachable from `loss`.

        Walks the node list in reverse exactly once; accumulation order is
        the fixed tape order, so repeated runs are bitwise identical.
        """
        if loss.values.size != 1:
            raise ValueError(f"backward target must be scalar, got shape {loss.shape}")
        if id(loss) not in self._live:
            raise ValueError("backward target was not recorded on this tape")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.values)
        else:
            loss.grad = loss.grad + np.ones_like(loss.values)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
                t.grad += ig


def backward(tape: Tape, loss: Tensor):
    """Functional alias for Tape.backward."""
    tape.backward(loss)
