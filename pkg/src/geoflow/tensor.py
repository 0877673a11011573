"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
thread's active :class:`Tape`.  Nodes are appended in creation order, so the
tape is already topologically sorted and :func:`backward` simply walks it in
reverse.  Leaves accumulate gradients (summation) until explicitly zeroed.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "concat",
    "finite_diff_check",
]


class Tape:
    """Ordered record of differentiable ops for one thread."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.node_id = None
            node._parents = ()
            node._backward = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float64 array that can take part in the tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.node_id = None
        out._parents = ()
        out._backward = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = fn
            active_tape().record(out)
        return out

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)),
        )

    def __rsub__(self, other) -> Tensor:
        return Tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / float(other))

    def __neg__(self) -> Tensor:
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def pow(self, exponent: float) -> Tensor:
        x = self.data
        return Tensor._from_op(
            x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),)
        )

    def __pow__(self, exponent: float) -> Tensor:
        return self.pow(exponent)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    # -- unary functions -----------------------------------------------------
    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,))

    def sin(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), fn
        )

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation --------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._from_op(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),)
        )

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx) -> Tensor:
        shape = self.shape

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in parts)

        def fn(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(np.asarray(self.data[idx]), (self,), fn)

    def broadcast_to(self, shape: tuple[int, ...]) -> Tensor:
        old = self.shape
        return Tensor._from_op(
            np.broadcast_to(self.data, shape).copy(),
            (self,),
            lambda g: (_unbroadcast(g, old),),
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; gradients are dA = dC Bᵀ and dB = Aᵀ dC."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._from_op(np.matmul(x, y), (a, b), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), fn)


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis with two-pass statistics, then apply the affine."""
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gdata = None if gamma is None else gamma.data
    out = xhat if gdata is None else xhat * gdata
    if beta is not None:
        out = out + beta.data
    parents: tuple[Tensor, ...] = (x,)
    if gamma is not None:
        parents += (gamma,)
    if beta is not None:
        parents += (beta,)

    def fn(g):
        dxhat = g if gdata is None else g * gdata
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray] = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return Tensor._from_op(out, parents, fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    y = 0.5 * v * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return Tensor._from_op(y, (x,), fn)


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * v))
    return Tensor._from_op(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn
    )


def backward(loss: Tensor) -> None:
    """Propagate d(loss) to every ``requires_grad`` leaf, then clear the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
    finally:
        tape.clear()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |central difference - autodiff| / max(1, |autodiff|).

    ``coords`` restricts the check to a subset of flat indices.
    """
    if h <= 0:
        raise ParameterError(f"finite difference step must be positive, got {h}")
    base = np.array(_as_array(x), dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            fd = (fp - fm) / (2 * h)
            g = analytic.reshape(-1)[i]
            worst = max(worst, abs(fd - g) / max(1.0, abs(g)))
    return worst
