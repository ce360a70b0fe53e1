"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record a node on the active tape of the current thread whenever one
of their inputs requires a gradient. `backward` walks the tape from the loss
node down to index 0, so nodes are processed in reverse topological order.
Without an active tape (or inside `no_grad`) nothing is recorded.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import ShapeError, TapeError

Array = np.ndarray
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

_local = threading.local()
_tape_ids = itertools.count()


@dataclass(frozen=True)
class NodeRef:
    tape_id: int
    generation: int
    index: int


@dataclass
class Node:
    kind: str
    parents: Tuple[Optional[int], ...]
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn
    output: "Tensor"


class Tape:
    """Ordered record of operations. Use as a context manager to make it active."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.generation = 0
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def owns(self, ref: Optional[NodeRef]) -> bool:
        return ref is not None and ref.tape_id == self.id and ref.generation == self.generation

    def record(self, kind: str, inputs: Tuple["Tensor", ...], backward: BackwardFn, output: "Tensor") -> NodeRef:
        parents = tuple(t.node.index if self.owns(t.node) else None for t in inputs)
        ref = NodeRef(self.id, self.generation, len(self.nodes))
        self.nodes.append(Node(kind, parents, inputs, backward, output))
        return ref

    def clear(self) -> None:
        """Drop every node; all references handed out so far become invalid"""
        self.nodes.clear()
        self.generation += 1

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.clear()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the current thread"""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self.node: Optional[NodeRef] = None
        self.name = name
        self._retain = False

    @classmethod
    def _from_op(cls, data: Array) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        out._retain = False
        return out

    # --- inspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> Array:
        """Flat row-major view of the data"""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> Array:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # --- gradient bookkeeping

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data)

    def _accumulate(self, grad: Array) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    # --- operators

    def __add__(self, other: ArrayLike) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return elementwise("add", other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return elementwise("sub", other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return elementwise("mul", other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return elementwise("div", other, self)

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def sqrt(self) -> "Tensor":
        return elementwise("sqrt", self)

    def abs(self) -> "Tensor":
        return elementwise("abs", self)

    def square(self) -> "Tensor":
        return elementwise("square", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)

    def silu(self) -> "Tensor":
        return elementwise("silu", self)

    def softplus(self) -> "Tensor":
        return elementwise("softplus", self)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._from_op(np.asarray(value, dtype=np.float64))


def make_op(kind: str, data: Array, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result and record it when gradients are needed.

    Custom primitives (e.g. the selective scan) are built on this too.
    """
    out = Tensor._from_op(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(kind, inputs, backward_fn, out)
    return out


def unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(*shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        listed = " and ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"cannot broadcast shapes {listed}") from None


def _sigmoid(x: Array) -> Array:
    return np.exp(-np.logaddexp(0.0, -x))


UNARY_KINDS = ("neg", "exp", "log", "sqrt", "abs", "square", "sigmoid", "silu", "softplus", "relu")
BINARY_KINDS = ("add", "sub", "mul", "div")


def elementwise(kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Apply one of the supported elementwise operations with broadcasting"""
    if kind in BINARY_KINDS:
        if b is None:
            raise ShapeError(f"'{kind}' needs two inputs")
        ta, tb = as_tensor(a), as_tensor(b)
        x, y = ta.data, tb.data
        broadcast_shape(x.shape, y.shape)
        if kind == "add":
            out = x + y
            grads = lambda g: (unbroadcast(g, x.shape), unbroadcast(g, y.shape))
        elif kind == "sub":
            out = x - y
            grads = lambda g: (unbroadcast(g, x.shape), unbroadcast(-g, y.shape))
        elif kind == "mul":
            out = x * y
            grads = lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape))
        else:
            out = x / y
            grads = lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape))
        return make_op(kind, out, (ta, tb), grads)

    if kind not in UNARY_KINDS:
        raise ValueError(f"unknown elementwise operation '{kind}'")
    if b is not None:
        raise ShapeError(f"'{kind}' takes a single input")
    ta = as_tensor(a)
    x = ta.data
    if kind == "neg":
        out, local = -x, lambda g: -g
    elif kind == "exp":
        out = np.exp(x)
        local = lambda g: g * out
    elif kind == "log":
        out, local = np.log(x), lambda g: g / x
    elif kind == "sqrt":
        out = np.sqrt(x)
        local = lambda g: g * 0.5 / out
    elif kind == "abs":
        # sign(0) == 0 is the subgradient used at ties
        out, local = np.abs(x), lambda g: g * np.sign(x)
    elif kind == "square":
        out, local = x * x, lambda g: g * 2.0 * x
    elif kind == "sigmoid":
        out = _sigmoid(x)
        local = lambda g: g * out * (1.0 - out)
    elif kind == "silu":
        s = _sigmoid(x)
        out = x * s
        local = lambda g: g * (s + x * s * (1.0 - s))
    elif kind == "softplus":
        out = np.logaddexp(0.0, x)
        local = lambda g: g * _sigmoid(x)
    else:
        out = np.where(x > 0, x, 0.0)
        local = lambda g: g * (x > 0)
    return make_op(kind, out, (ta,), lambda g: (local(g),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    x, y = ta.data, tb.data
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {x.shape} @ {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
    broadcast_shape(x.shape[:-2], y.shape[:-2])
    out = x @ y

    def _backward(g: Array):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)

    return make_op("matmul", out, (ta, tb), _backward)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a rank-{ndim} tensor")
    return axis % ndim


def reduce(kind: str, x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Reduce with mean, max or sum along one axis (or over everything when axis is None)"""
    tx = as_tensor(x)
    data = tx.data
    if axis is not None:
        axis = _normalize_axis(axis, data.ndim)

    def _expand(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(np.reshape(g, (1,) * data.ndim), data.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, data.shape)

    if kind == "sum":
        out = data.sum(axis=axis, keepdims=keepdims)
        return make_op("sum", out, (tx,), lambda g: (_expand(g).copy(),))
    if kind == "mean":
        count = data.size if axis is None else data.shape[axis]
        out = data.mean(axis=axis, keepdims=keepdims)
        return make_op("mean", out, (tx,), lambda g: (_expand(g) / count,))
    if kind == "max":
        out = data.max(axis=axis, keepdims=keepdims)

        def _backward(g: Array):
            # the gradient goes to the first maximal element only
            if axis is None:
                mask = np.zeros(data.size)
                mask[np.argmax(data)] = 1.0
                return (mask.reshape(data.shape) * _expand(g),)
            first = np.expand_dims(np.argmax(data, axis=axis), axis)
            mask = np.zeros_like(data)
            np.put_along_axis(mask, first, 1.0, axis=axis)
            return (mask * _expand(g),)

        return make_op("max", out, (tx,), _backward)
    raise ValueError(f"unknown reduction '{kind}'")


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    tx = as_tensor(x)
    try:
        out = tx.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {tx.shape} into {tuple(shape)}") from None
    return make_op("reshape", out, (tx,), lambda g: (g.reshape(tx.shape),))


def transpose(x: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    tx = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(tx.ndim)))
    if sorted(a % tx.ndim for a in axes) != list(range(tx.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for shape {tx.shape}")
    inverse = np.argsort([a % tx.ndim for a in axes])
    out = np.transpose(tx.data, axes)
    return make_op("transpose", out, (tx,), lambda g: (np.transpose(g, inverse),))


def getitem(x: ArrayLike, key) -> Tensor:
    tx = as_tensor(x)
    out = tx.data[key]

    def _backward(g: Array):
        full = np.zeros_like(tx.data)
        np.add.at(full, key, g)
        return (full,)

    return make_op("getitem", np.array(out), (tx,), _backward)


def take(x: ArrayLike, indices: Array, axis: int) -> Tensor:
    """Gather along one axis; the index array may have any shape"""
    tx = as_tensor(x)
    axis = _normalize_axis(axis, tx.ndim)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(tx.data, indices, axis=axis)

    def _backward(g: Array):
        full = np.zeros_like(tx.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return make_op("take", out, (tx,), _backward)


def pad(x: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; `widths` has one (before, after) pair per axis"""
    tx = as_tensor(x)
    if len(widths) != tx.ndim:
        raise ShapeError(f"pad widths {widths} do not match rank {tx.ndim}")
    out = np.pad(tx.data, widths)
    region = tuple(slice(before, before + size) for (before, _), size in zip(widths, tx.shape))
    return make_op("pad", out, (tx,), lambda g: (g[region],))


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout with a mask drawn from `rng` (an app.engine.rng.Rng)"""
    if rate <= 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * keep


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that requires it"""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss.node is None or tape is None or not tape.owns(loss.node):
        raise TapeError("loss is detached: it was not recorded on the active tape")

    pending: dict[int, Array] = {loss.node.index: np.ones_like(loss.data)}
    for index in range(loss.node.index, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        if node.output._retain:
            node.output._accumulate(grad)
        for tensor, parent, parent_grad in zip(node.inputs, node.parents, node.backward(grad)):
            if parent_grad is None or not tensor.requires_grad:
                continue
            if parent is not None:
                pending[parent] = pending[parent] + parent_grad if parent in pending else parent_grad
            else:
                tensor._accumulate(parent_grad)
