"""Dense float tensors that record the operations applied to them.

Every differentiable operation returns a new :class:`Tensor` whose ``node``
remembers the inputs and a closure mapping the upstream gradient to the
input gradients. :func:`backward` walks that graph once in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, InvalidShapeError, NumericError

DTYPE = np.float32
_PRECISION = {"dtype": DTYPE}


def default_dtype():
    """Storage dtype for newly created tensors (float32 unless overridden)."""
    return _PRECISION["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors in ``dtype`` inside the block.

    Training always runs in float32; the gradient checker evaluates its
    finite-difference oracle in float64 so rounding noise does not dominate
    the difference quotients.
    """
    previous = _PRECISION["dtype"]
    _PRECISION["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _PRECISION["dtype"] = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class OpNode:
    """One recorded operation: its kind, inputs and backward rule."""

    kind: str
    inputs: tuple["Tensor", ...]
    backward_fn: BackwardFn
    saved_context: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """N-dimensional float array (up to 4 axes) with an optional gradient.

    Activations and parameters are stored as 32-bit floats (see
    :func:`precision`). Scalar reductions keep a 64-bit value so that
    finite-difference checks are not swamped by rounding in the final sum.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.ndim > 4:
            raise InvalidShapeError(f"tensors have at most 4 axes, got shape {arr.shape}")
        if arr.dtype != np.float64 or arr.ndim != 0:
            arr = np.ascontiguousarray(arr, dtype=default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: OpNode | None = None
        self.name = name

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        kind: str,
        inputs: Sequence["Tensor"],
        backward_fn: BackwardFn,
        **saved_context: Any,
    ) -> "Tensor":
        out = cls(data)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = OpNode(kind, tuple(inputs), backward_fn, saved_context)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar routes through ops so the graph is recorded.
    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from .ops import sum_all

        return sum_all(self)

    def mean(self) -> "Tensor":
        from .ops import mean_all

        return mean_all(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Fill ``.grad`` of every tensor that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    steps); intermediate tensors receive the gradient of this pass only.
    With ``free_graph`` the recorded nodes are dropped afterwards, so a
    second call on the same loss is a contract error.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {loss.item()!r}")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient reached {t.name or 'leaf tensor'}")
            t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        t.grad = g
        in_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise InvalidShapeError(
                    f"{t.node.kind} backward produced {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if free_graph:
            t.node = None
