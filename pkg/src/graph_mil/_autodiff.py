"""
Dense reverse-mode differentiation over float64 matrices.

Every operation records a ``Node`` holding its value, a zero-initialized gradient
slot and a closure mapping the output gradient to the gradients of its parents.
``backward`` replays the recorded tape in reverse topological order. Leaf
gradients are accumulated across calls, which is what gradient accumulation
relies on; intermediate gradients are reset at the start of every call.
"""

from __future__ import annotations

import contextlib

from collections.abc import Callable
from collections.abc import Iterator
from collections.abc import Sequence
from contextvars import ContextVar
from typing import Any
from typing import Literal

import numpy as np

from numpy.typing import ArrayLike
from numpy.typing import NDArray
from scipy.special import expit
from scipy.special import softmax

from graph_mil._errors import GraphMilInvariantError
from graph_mil._errors import GraphMilNonFiniteError
from graph_mil._errors import GraphMilShapeError


Matrix = NDArray[np.float64]
Activation = Literal["sigmoid", "tanh", "relu", "leaky_relu", "elu", "identity"]
BackwardFn = Callable[[Matrix], Sequence["Matrix | None"]]

LOG_CLAMP = 1e-7

_recording: ContextVar[bool] = ContextVar("graph_mil_recording", default=True)


def as_matrix(data: ArrayLike) -> Matrix:
    """Coerce scalars, vectors and 2-D arrays into a finite float64 matrix."""
    array = np.array(data, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise GraphMilShapeError(f"Expected at most 2 dimensions, got {array.ndim}.")
    if not np.isfinite(array).all():
        raise GraphMilNonFiniteError("Matrix contains NaN or infinite entries.")
    return array


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them on the tape."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get()


class Node:
    """A differentiable matrix value."""

    __slots__ = ("_backward", "_parents", "grad", "op", "value")

    def __init__(
        self,
        value: ArrayLike,
        parents: tuple[Node, ...] = (),
        backward: BackwardFn | None = None,
        op: str = "const",
    ) -> None:
        self.value: Matrix = as_matrix(value)
        self.grad: Matrix = np.zeros_like(self.value)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.value.shape
        return rows, cols

    @property
    def requires_grad(self) -> bool:
        return bool(self._parents)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise GraphMilShapeError(f"item() needs a 1x1 matrix, got {self.shape}.")
        return float(self.value[0, 0])

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)

    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __sub__(self, other: Node) -> Node:
        return sub(self, other)

    def __mul__(self, other: Node) -> Node:
        return mul(self, other)

    @property
    def T(self) -> Node:  # noqa: N802
        return transpose(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"


class Parameter(Node):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: ArrayLike) -> None:
        super().__init__(value, op="param")
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return True

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def constant(value: ArrayLike) -> Node:
    return Node(value)


def _make(
    value: Matrix, op: str, parents: tuple[Node, ...], backward: BackwardFn
) -> Node:
    if not _recording.get() or not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents=parents, backward=backward, op=op)


def _unbroadcast(grad: Matrix, shape: tuple[int, ...]) -> Matrix:
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphMilShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast."
        ) from None


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise GraphMilShapeError(
            f"matmul: inner dimensions differ ({a.shape} x {b.shape})."
        )

    def backward(g: Matrix) -> tuple[Matrix, Matrix]:
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, "matmul", (a, b), backward)


def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")

    def backward(g: Matrix) -> tuple[Matrix, Matrix]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")

    def backward(g: Matrix) -> tuple[Matrix, Matrix]:
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.value - b.value, "sub", (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")

    def backward(g: Matrix) -> tuple[Matrix, Matrix]:
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, "mul", (a, b), backward)


def scale(a: Node, factor: float) -> Node:
    def backward(g: Matrix) -> tuple[Matrix]:
        return (g * factor,)

    return _make(a.value * factor, "scale", (a,), backward)


def transpose(a: Node) -> Node:
    def backward(g: Matrix) -> tuple[Matrix]:
        return (g.T,)

    return _make(a.value.T.copy(), "transpose", (a,), backward)


def elementwise(
    kind: Activation, x: Node, slope: float = 0.2, alpha: float = 1.0
) -> Node:
    """Apply an activation entrywise."""
    v = x.value
    if kind == "sigmoid":
        out = expit(v)
        local = out * (1.0 - out)
    elif kind == "tanh":
        out = np.tanh(v)
        local = 1.0 - out**2
    elif kind == "relu":
        out = np.maximum(v, 0.0)
        local = (v > 0).astype(np.float64)
    elif kind == "leaky_relu":
        out = np.where(v > 0, v, slope * v)
        local = np.where(v > 0, 1.0, slope)
    elif kind == "elu":
        negative = np.minimum(v, 0.0)
        out = np.where(v > 0, v, alpha * np.expm1(negative))
        local = np.where(v > 0, 1.0, alpha * np.exp(negative))
    elif kind == "identity":
        out = v.copy()
        local = np.ones_like(v)
    else:
        raise GraphMilInvariantError(f"Unknown activation '{kind}'.")

    def backward(g: Matrix) -> tuple[Matrix]:
        return (g * local,)

    return _make(out, kind, (x,), backward)


def softmax_rows(x: Node, mask: NDArray[np.bool_] | None = None) -> Node:
    """
    Row-wise softmax. When ``mask`` is given, entries where it is False receive
    probability zero and are excluded from the normalization.
    """
    if mask is None:
        probs = softmax(x.value, axis=1)
    else:
        if mask.shape != x.shape:
            raise GraphMilShapeError(
                f"softmax mask shape {mask.shape} differs from {x.shape}."
            )
        if not mask.any(axis=1).all():
            raise GraphMilShapeError("softmax mask leaves a row without entries.")
        probs = softmax(np.where(mask, x.value, -np.inf), axis=1)

    def backward(g: Matrix) -> tuple[Matrix]:
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner),)

    return _make(probs, "softmax", (x,), backward)


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise GraphMilShapeError(
            f"concat: row counts differ ({a.shape[0]} vs {b.shape[0]})."
        )
    split = a.shape[1]

    def backward(g: Matrix) -> tuple[Matrix, Matrix]:
        return g[:, :split], g[:, split:]

    return _make(np.hstack([a.value, b.value]), "concat", (a, b), backward)


def max_rows(x: Node) -> Node:
    """Column-wise maximum over rows; ties route the gradient to the lowest row."""
    winners = np.argmax(x.value, axis=0)
    cols = np.arange(x.shape[1])

    def backward(g: Matrix) -> tuple[Matrix]:
        grad = np.zeros_like(x.value)
        grad[winners, cols] = g[0]
        return (grad,)

    return _make(x.value[winners, cols].reshape(1, -1), "max_rows", (x,), backward)


def mean_rows(x: Node) -> Node:
    n = x.shape[0]

    def backward(g: Matrix) -> tuple[Matrix]:
        return (np.repeat(g / n, n, axis=0),)

    return _make(x.value.mean(axis=0, keepdims=True), "mean_rows", (x,), backward)


def select_row(x: Node, index: int) -> Node:
    if not 0 <= index < x.shape[0]:
        raise GraphMilShapeError(f"Row {index} out of range for {x.shape}.")

    def backward(g: Matrix) -> tuple[Matrix]:
        grad = np.zeros_like(x.value)
        grad[index] = g[0]
        return (grad,)

    return _make(x.value[index : index + 1].copy(), "select_row", (x,), backward)


def sum_all(x: Node) -> Node:
    def backward(g: Matrix) -> tuple[Matrix]:
        return (np.full_like(x.value, g[0, 0]),)

    return _make(np.array([[x.value.sum()]]), "sum", (x,), backward)


def bce_loss(pred: Node, labels: ArrayLike) -> Node:
    """
    Mean binary cross-entropy of probabilities against {0, 1} labels.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm; clamped
    entries pass no gradient.
    """
    y = as_matrix(labels).reshape(pred.shape)
    p = pred.value
    clamped = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    n = p.size
    terms = y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)
    value = np.array([[-terms.sum() / n]])
    inside = (p >= LOG_CLAMP) & (p <= 1.0 - LOG_CLAMP)

    def backward(g: Matrix) -> tuple[Matrix]:
        local = (clamped - y) / (clamped * (1.0 - clamped)) / n
        return (np.where(inside, local, 0.0) * g[0, 0],)

    return _make(value, "bce", (pred,), backward)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            parent_state = state.get(id(parent))
            if parent_state == 1:
                raise GraphMilInvariantError("Cycle in computation graph.")
            if parent_state is None:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """
    Populate ``grad`` on every node reachable from a scalar ``loss``.

    Parameter gradients accumulate across calls until they are zeroed.
    """
    if loss.shape != (1, 1):
        raise GraphMilShapeError(f"backward needs a scalar loss, got {loss.shape}.")

    order = _topological_order(loss)
    for node in order:
        if node._parents:
            node.zero_grad()
    loss.grad = loss.grad + 1.0

    for node in reversed(order):
        if node._backward is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = parent.grad + grad


def parameters_of(*nodes: Any) -> list[Parameter]:
    """Flatten parameters found in nested containers, keeping first-seen order."""
    seen: dict[int, Parameter] = {}

    def visit(item: Any) -> None:
        if isinstance(item, Parameter):
            seen.setdefault(id(item), item)
        elif isinstance(item, dict):
            for value in item.values():
                visit(value)
        elif isinstance(item, (list, tuple)):
            for value in item:
                visit(value)

    for node in nodes:
        visit(node)
    return list(seen.values())
