"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Every operation on :class:`Tensor` objects records a node holding its
inputs and a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
All data is kept in float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "count_macs",
    "topological_order",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softmax",
    "log_softmax",
    "layernorm",
    "neg_sq_dist",
    "concat",
    "slice_rows",
    "broadcast_to",
    "elementwise",
    "SGD",
    "sgd_momentum_step",
]

_grad_enabled = True
_mac_counters: list["MacCounter"] = []

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class Tensor:
    """A float64 array that may take part in a recorded computation graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "",
                 _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._op = _op
        self._backward = _backward

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in _axes(axis)])
        return scale(tsum(self, axis, keepdims), 1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    # -- differentiation -------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Gradients accumulate across calls; clear them with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        order = topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axes(axis) -> tuple[int, ...]:
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each input listed before its consumers."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    def __init__(self):
        self.macs = 0


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by ``matmul`` inside the block."""
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), "gelu", backward)


def neg_sq_dist(c, anchors) -> Tensor:
    """Elementwise -(c - b)^2, the logits of the anchor encoding."""
    d = sub(c, anchors)
    return scale(mul(d, d), -1.0)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "gelu": gelu,
    "neg_sq_dist": neg_sq_dist,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of add, sub, mul, scale, gelu, neg_sq_dist by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- reductions and layout -------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in _axes(axis)))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), "getitem", backward)


def slice_rows(a: Tensor, start: int, stop: int | None = None, axis: int = 0) -> Tensor:
    """Rows ``start:stop`` along ``axis``; out-of-range bounds raise IndexError."""
    n = a.shape[axis]
    stop = start + 1 if stop is None else stop
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice [{start}:{stop}] out of range for extent {n} on axis {axis}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return getitem(a, tuple(idx))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(out, ts, "concat", lambda g: tuple(np.split(g, cuts, axis=ax)))


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    One-dimensional operands are promoted to a row (left) or column (right).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    if _mac_counters:
        m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
        macs = int(np.prod(batch, dtype=np.int64)) * m * k * n
        for c in _mac_counters:
            c.macs += macs
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), "matmul", backward)


# -- normalisation ---------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (biased variance), then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), "layernorm", backward)


# -- optimisation ----------------------------------------------------------

def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float,
                      momentum: float) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Functional form: v <- momentum * v + g ; p <- p - lr * v."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"sgd step for {name!r}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        new_v[name] = momentum * v + g
        new_p[name] = p - lr * new_v[name]
    return new_p, new_v


class SGD:
    """Stochastic gradient descent with heavy-ball momentum over named tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        new_p, new_v = sgd_momentum_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in self.params.items()},
            self.velocity,
            lr, self.momentum,
        )
        for k, p in self.params.items():
            p.data = new_p[k]
        self.velocity = new_v
