"""Dense tensor value and the gradient tape used for reverse-mode differentiation.

A :class:`Tensor` is a thin wrapper around a contiguous numpy array of rank at
most 4 (N, C, H, W).  Operations in :mod:`covct.ops` read ``.data``, produce a
fresh Tensor and, when a :class:`GradTape` is active, append a node holding a
backward closure.  :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyTapeError, ParameterError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "covct_active_tape", default=None
)


def resolve_dtype(precision) -> np.dtype:
    if precision is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ParameterError(f"unknown precision {precision!r}; expected f32 or f64") from None
    return np.dtype(precision)


class Tensor:
    """Immutable-by-convention dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.ascontiguousarray(arr)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank <= 4, got shape {arr.shape}")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps dL/d(output) to dL/d(input) for each input; None where not needed
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    context: dict = field(default_factory=dict)


class GradTape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager::

        with GradTape() as tape:
            loss = cross_entropy_loss(forward(model, x, "train"), y)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn, **context) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn, context))


def active_tape() -> GradTape | None:
    return _active_tape.get()


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn, **context) -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient."""
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward_fn, **context)
    return output


def backward(tape: GradTape, loss: Tensor, seed_grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from ``loss``.

    Leaf tensors that require gradients get their ``.grad`` set (overwritten,
    not accumulated across calls).  Returns the full gradient buffer keyed by
    ``id(tensor)``.
    """
    if tape is None or not tape.nodes:
        raise EmptyTapeError("backward called on an empty tape; run a forward pass under GradTape first")
    if seed_grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss or an explicit seed gradient, got shape {loss.shape}")
        seed_grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=loss.dtype)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_inputs = node.backward(g_out)
        for inp, g in zip(node.inputs, g_inputs):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = None if g is None else g.reshape(leaf.shape)
    return grads
