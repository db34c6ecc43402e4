"""Dense tensors with tape-free reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` holding references to its
inputs and a closure that maps the upstream gradient to input gradients.
:func:`backward` walks the resulting DAG once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated (cycle, non-scalar loss)."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the backward closure if any input needs gradients."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError("cycle detected in computation graph")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            p = parents[i]
            if p.requires_grad:
                ps = state.get(id(p))
                if ps == 1:
                    raise GraphError("cycle detected in computation graph")
                if ps is None:
                    stack.append((p, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GraphError(f"gradient shape {pg.shape} != tensor shape {p.shape} in {node.op}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg.astype(p.data.dtype, copy=False)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable parameters get zeros."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        backward(loss)
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    finally:
        for p, s in zip(params, saved):
            p.grad = s


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = _lift(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make(out, (a,), bw, "pow")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return make(out, (a,), bw, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return make(np.log(a.data), (a,), bw, "log")


def log2(a: Tensor) -> Tensor:
    inv_ln2 = 1.0 / np.log(2.0)

    def bw(g):
        return (g * inv_ln2 / a.data,)

    return make(np.log2(a.data), (a,), bw, "log2")


def absolute(a: Tensor) -> Tensor:
    def bw(g):
        return (g * np.sign(a.data),)

    return make(np.abs(a.data), (a,), bw, "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make(out, (a,), bw, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def bw(g):
        return (g / (1.0 + np.exp(-x)),)

    return make(out, (a,), bw, "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return make(a.data * mask, (a,), bw, "relu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        return (g * (s + x * s * (1.0 - s)),)

    return make(x * s, (a,), bw, "silu")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient is zero where the floor is active."""
    mask = a.data >= floor

    def bw(g):
        return (g * mask,)

    return make(np.where(mask, a.data, np.asarray(floor, a.data.dtype)), (a,), bw, "maximum")


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, Phi(x) = erfc(-x / sqrt 2) / 2."""
    from scipy.special import erfc

    x = a.data
    out = (0.5 * erfc(-x / np.sqrt(2.0))).astype(x.dtype)
    c = 1.0 / np.sqrt(2.0 * np.pi)

    def bw(g):
        return (g * c * np.exp(-0.5 * x * x),)

    return make(out, (a,), bw, "normal_cdf")


def straight_through_round(a: Tensor) -> Tensor:
    """Round half away from zero in the forward pass, identity gradient in the backward pass."""
    out = np.sign(a.data) * np.floor(np.abs(a.data) + 0.5)

    def bw(g):
        return (g,)

    return make(out.astype(a.data.dtype), (a,), bw, "ste_round")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make(np.array(a.data[index]), (a,), bw, "getitem")


def _needs_add_at(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw, "softmax")


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each pixel of an (N, C, H, W) tensor ``factor`` times along both spatial axes."""
    if factor == 1:
        return a
    out = a.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        n, c, h, w = a.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make(out, (a,), bw, "upsample")
