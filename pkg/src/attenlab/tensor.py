"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a fresh :class:`Tensor`; inputs are never mutated. When
gradient recording is enabled and at least one input requires a gradient,
the result remembers its parents and a backward rule. :func:`backward`
walks that record in reverse topological order.

Feature maps use the (batch, height, width, channel) axis order throughout
the package.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _guided() -> bool:
    return getattr(_state, "guided", False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def guided_relu(record: list | None = None) -> Iterator[None]:
    """Switch relu backward to the guided rule for backward passes run inside.

    Under the guided rule a relu passes gradient only where both the forward
    input and the incoming gradient are positive. If ``record`` is given, each
    relu backward appends the number of positions the extra mask zeroed
    (positions vanilla backprop would have kept).
    """
    prev = (_guided(), getattr(_state, "guided_record", None))
    _state.guided = True
    _state.guided_record = record
    try:
        yield
    finally:
        _state.guided, _state.guided_record = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, attaching ``backward_fn`` when a graph is recorded.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs first."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` with d(loss)/d(node) for every node needing it.

    Leaf gradients accumulate across calls; callers reset them (e.g. via
    ``zero_grad``) once per optimisation step. Gradients of intermediate
    nodes are recomputed from scratch on every call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring a gradient")
    order = topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data) if loss.grad is None or not loss.is_leaf else loss.grad + 1.0
    for node in reversed(order):
        if node.is_leaf or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                g = np.broadcast_to(g, parent.shape)
            if parent.grad is None:
                parent.grad = np.array(g) if parent.is_leaf else g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting expanded to reach it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_op(a.data * k, (a,), lambda g: (g * k,))


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul``/``scale`` by name."""
    if kind == "scale":
        return scale(as_tensor(a), b)
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes (if any) are batch axes shared by both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        g = np.ascontiguousarray(g)
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_op(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} ({a.size} values) to {shape}")
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(np.array(a.data[idx]), (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g):
        if _guided():
            keep = pos & (g > 0)
            record = getattr(_state, "guided_record", None)
            if record is not None:
                record.append(int(np.count_nonzero(pos & ~keep)))
            return (g * keep,)
        return (g * pos,)

    return make_op(a.data * pos, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    p = x >= 0
    y[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    y[~p] = e / (1.0 + e)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), bw)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    max_elems: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between autodiff and central differences.

    The error per element is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    ``max_elems`` restricts the finite-difference sweep to a seeded random
    subset of elements for large inputs.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("f(x) is not finite")
    if y.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(y)
    g_ad = np.zeros_like(x0) if xt.grad is None else xt.grad

    flat = np.arange(x0.size)
    if max_elems is not None and max_elems < x0.size:
        flat = np.sort(np.random.default_rng(seed).choice(x0.size, max_elems, replace=False))

    worst = 0.0
    for i in flat:
        pos = np.unravel_index(i, x0.shape)
        xp = x0.copy()
        xp[pos] += eps
        xm = x0.copy()
        xm[pos] -= eps
        with no_grad():
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("f is not finite near x")
        g_fd = (fp - fm) / (2 * eps)
        a = g_ad[pos]
        err = abs(a - g_fd) / max(abs(a), abs(g_fd), 1e-8)
        worst = max(worst, err)
    return float(worst)
