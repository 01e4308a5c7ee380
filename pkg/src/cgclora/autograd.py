"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a closure that
maps the output adjoint to parent adjoints. :func:`backward` walks the graph in
reverse topological order and accumulates gradients into ``Tensor.grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, NumericError, OracleError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # construction -------------------------------------------------------
    @classmethod
    def _make(cls, data, parents: tuple, backward, op: str) -> "Tensor":
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), back, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def back(g):
            return (_unbroadcast(g * b, a.shape) if need_a else None,
                    _unbroadcast(g * a, b.shape) if need_b else None)

        return Tensor._make(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a_shape = self.shape

        def back(g):
            full = np.zeros(a_shape, dtype=DTYPE)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back, "getitem")

    # reductions and reshaping ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a_shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(a_shape),), "reshape"
        )

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    # elementwise --------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or batched alike."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad  # skip work for constant operands

    def back(g):
        ga = gb = None
        if y.ndim == 1:
            if need_a:
                ga = np.multiply.outer(g, y)
            if need_b:
                gb = np.tensordot(x, g, axes=(tuple(range(x.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if need_b:
            if y.ndim == 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return Tensor._make(x @ y, (a, b), back, "matmul")


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if np.isnan(v.data).any():
        raise NumericError("softmax input contains NaN")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (v,), back, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (v,), back, "log_softmax")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat"
    )


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant; no gradient flows there."""
    keep = ~np.broadcast_to(mask, x.shape)

    def back(g):
        return (g * keep,)

    return Tensor._make(np.where(keep, x.data, value), (x,), back, "masked_fill")


def gelu(x: Tensor) -> Tensor:
    c = np.sqrt(2.0 / np.pi)
    inner = (x + (x * x * x) * 0.044715) * c
    return x * 0.5 * (inner.tanh() + 1.0)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt()


class ComputationRecord:
    """Topologically ordered list of the operations reachable from ``root``."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.ops = order

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.ops if t.requires_grad and not t._parents]


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record is None:
        record = ComputationRecord(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.ops):
        g = adj.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            adj[key] = pg if key not in adj else adj[key] + pg


def grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` takes no arguments and reads ``params`` (mutated in place here).
    Returns the maximum relative error with denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if float(f().data) != float(loss.data):
        raise OracleError("function under check is not deterministic")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat_grad = analytic.reshape(-1)
            for i in range(p.data.size):
                idx = np.unravel_index(i, p.shape)
                orig = p.data[idx]
                p.data[idx] = orig + eps
                up = float(f().data)
                p.data[idx] = orig - eps
                down = float(f().data)
                p.data[idx] = orig
                numeric = (up - down) / (2.0 * eps)
                a = float(flat_grad[i])
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
