"""Dense tensors with reverse-mode gradient recording"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ShapeError

GradRule = Callable[[np.ndarray], np.ndarray]

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost tape recording on this thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Raise FloatingPointError when a forward op produces NaN or Inf"""
    previous = getattr(_state, "debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the current thread (teacher inference)"""
    saved = list(_tape_stack())
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


class Tape:
    """Execution-ordered record of differentiable operations.

    Creation order of recorded tensors is already a valid topological
    order, so backward is a single reverse sweep.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: "Tensor") -> None:
        node._tape = self
        self._nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ShapeError("loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            for parent, rule in zip(node._parents, node._rules):
                if not parent.requires_grad:
                    continue
                contribution = rule(grad)
                if parent._tape is self:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + contribution
                    else:
                        pending[key] = contribution
                else:
                    parent._accumulate(contribution)


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on"""
    if loss._tape is None:
        raise ShapeError("loss is not on a tape; run the forward pass inside `with Tape()`")
    loss._tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Immutable dense array, optionally tracked for gradients"""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._rules: tuple[GradRule, ...] = ()
        self._tape: Optional[Tape] = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.dtype))

    @staticmethod
    def _result(data: np.ndarray, links: Sequence[tuple["Tensor", GradRule]]) -> "Tensor":
        if getattr(_state, "debug", False) and not np.all(np.isfinite(data)):
            if all(np.all(np.isfinite(parent.data)) for parent, _ in links):
                raise FloatingPointError("non-finite value produced from finite inputs")
        out = Tensor(data)
        tape = active_tape()
        if tape is not None and any(parent.requires_grad for parent, _ in links):
            out.requires_grad = True
            out._parents = tuple(parent for parent, _ in links)
            out._rules = tuple(rule for _, rule in links)
            tape.record(out)
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    # -- array protocol -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- elementwise arithmetic -----------------------------------------

    def _binary_shape(self, other: "Tensor") -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError as e:
            raise ShapeError(f"cannot broadcast {self.shape} with {other.shape}") from e

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        self._binary_shape(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            [
                (self, lambda g: _unbroadcast(g, a_shape)),
                (other, lambda g: _unbroadcast(g, b_shape)),
            ],
        )

    def __radd__(self, other) -> "Tensor":
        return Tensor._lift(other, self) + self

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        self._binary_shape(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            [
                (self, lambda g: _unbroadcast(g, a_shape)),
                (other, lambda g: -_unbroadcast(g, b_shape)),
            ],
        )

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other, self) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        self._binary_shape(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            [
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ],
        )

    def __rmul__(self, other) -> "Tensor":
        return Tensor._lift(other, self) * self

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        self._binary_shape(other)
        a, b = self.data, other.data
        return Tensor._result(
            a / b,
            [
                (self, lambda g: _unbroadcast(g / b, a.shape)),
                (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
            ],
        )

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._lift(other, self) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, [(self, lambda g: -g)])

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor._result(
            a**exponent, [(self, lambda g: g * exponent * a ** (exponent - 1))]
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, Tensor._lift(other, self))

    def __getitem__(self, index) -> "Tensor":
        a = self.data
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)

        def rule(g: np.ndarray) -> np.ndarray:
            full = np.zeros_like(a)
            np.add.at(full, index, g)
            return full

        return Tensor._result(a[index], [(self, rule)])

    # -- reductions and shape -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.shape

        def rule(g: np.ndarray) -> np.ndarray:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a_shape).copy()

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), [(self, rule)])

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def max(self, axis=None, keepdims: bool = False) -> np.ndarray:
        """Plain maximum, not differentiable (used for stabilising shifts)"""
        return self.data.max(axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        a_shape = self.shape
        return Tensor._result(self.data.reshape(*shape), [(self, lambda g: g.reshape(a_shape))])

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return Tensor._result(
            np.swapaxes(self.data, axis1, axis2),
            [(self, lambda g: np.swapaxes(g, axis1, axis2))],
        )

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    # -- elementwise functions ------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, [(self, lambda g: g * out)])

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), [(self, lambda g: g / a)])

    def sqrt(self) -> "Tensor":
        return self**0.5


class Parameter(Tensor):
    """Trainable leaf tensor; the optimizer swaps its data array"""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def assign(self, data: np.ndarray) -> None:
        if data.shape != self.data.shape:
            raise ShapeError(f"cannot assign {data.shape} to parameter of shape {self.shape}")
        self.data = np.asarray(data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return Tensor._result(
        x @ y,
        [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)),
        ],
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim:
            raise ShapeError("concat operands must share rank")
        other_dims = [d for i, d in enumerate(t.shape) if i != axis]
        first_dims = [d for i, d in enumerate(tensors[0].shape) if i != axis]
        if other_dims != first_dims:
            raise ShapeError(f"concat shape mismatch along non-concat axes: {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    links = []
    for position, t in enumerate(tensors):

        def rule(g: np.ndarray, position=position) -> np.ndarray:
            return np.split(g, bounds, axis=axis)[position]

        links.append((t, rule))
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), links)
