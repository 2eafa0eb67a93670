"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. Recording is define-by-run: build a fresh tape per step, watch the
leaves, run the forward pass, then call :func:`backward` on a scalar root.

Values are float64 unless created from float32 data, in which case they stay
float32; mixing the two promotes to float64 as numpy does.

>>> tape = Tape()
>>> x = tape.watch([1.0, 2.0, 3.0])
>>> grads = backward(sum_(x * x))
>>> grads[x.node]
array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteProbe",
    "as_tensor",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "sum_",
    "mean",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "square",
    "abs_",
    "softplus",
    "relu",
    "sigmoid",
    "softmax",
    "l2_norm",
    "normalize",
    "concat",
    "scale",
    "reshape",
    "broadcast_to",
    "take",
    "cumsum",
    "clip",
    "where",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteProbe(ArithmeticError):
    """A finite-difference probe evaluated to a non-finite value."""

    def __init__(self, coordinates: list[tuple[int, ...]]):
        self.coordinates = coordinates
        super().__init__(f"non-finite function value at probes {coordinates}")


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]
    shape: tuple[int, ...]
    dtype: type = np.float64


@dataclass
class Tape:
    """Ordered record of operations; parents always precede children."""

    nodes: list[_Node] = field(default_factory=list)

    def watch(self, data) -> "Tensor":
        """Create a tracked leaf tensor holding a copy of ``data``."""
        arr = np.array(data, dtype=_dtype_of(data))
        self.nodes.append(_Node((), (), arr.shape, arr.dtype))
        return Tensor(arr, self, len(self.nodes) - 1)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.parents and not n.vjps]

    def _record(self, parents, vjps, shape, dtype) -> int:
        self.nodes.append(_Node(tuple(parents), tuple(vjps), shape, dtype))
        return len(self.nodes) - 1


def _dtype_of(data):
    dt = getattr(data, "dtype", None)
    return np.float32 if dt == np.float32 else np.float64


class Tensor:
    """Dense float array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=_dtype_of(data))
        self.tape = tape
        self.node = node

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
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce binary operands; bare Python scalars adopt the other operand's dtype."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def _make(value: np.ndarray, inputs: Sequence[Tensor], vjps) -> Tensor:
    """Wrap ``value``; record a node if any input is tracked."""
    tape = None
    parents, fns = [], []
    for t, fn in zip(inputs, vjps):
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands are tracked on different tapes")
        parents.append(t.node)
        fns.append(fn)
    if tape is None:
        return Tensor(value)
    return Tensor(value, tape, tape._record(parents, fns, value.shape, value.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def scale(a, k: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    k = float(k)
    return _make(a.data * k, (a,), (lambda g: g * k,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 1-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = np.matmul(a.data, b.data)
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data

    def _g2(g):
        if a.ndim == 1:
            g = np.expand_dims(g, -2)
        if b.ndim == 1:
            g = g[..., None]
        return g

    if b.ndim == 2 and a.ndim >= 2:
        # common dense-layer case: fold batch dims into rows
        def va(g):
            return g @ b.data.T

        def vb(g):
            return A.reshape(-1, ka).T @ g.reshape(-1, B.shape[-1])

        return _make(out, (a, b), (va, vb))

    def va(g):
        ga = np.matmul(_g2(g), np.swapaxes(B, -1, -2))
        ga = _unbroadcast(ga, A.shape)
        return ga.reshape(a.shape)

    def vb(g):
        gb = np.matmul(np.swapaxes(A, -1, -2), _g2(g))
        gb = _unbroadcast(gb, B.shape)
        return gb.reshape(b.shape)

    return _make(out, (a, b), (va, vb))


def linear(x, W, b=None, relu: bool = False) -> Tensor:
    """Dense layer ``x @ W + b`` over the last axis of ``x``, optionally rectified."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {W.shape} are not aligned")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        b = as_tensor(b)
        out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)
    out = out.reshape(lead + (W.shape[1],))
    m = W.shape[1]

    def gate(g):
        g = g.reshape(-1, m)
        return g * (out.reshape(-1, m) > 0) if relu else g

    def vx(g):
        return (gate(g) @ W.data.T).reshape(x.shape)

    def vW(g):
        return x2.T @ gate(g)

    if b is None:
        return _make(out, (x, W), (vx, vW))

    def vb(g):
        return gate(g).sum(axis=0)

    return _make(out, (x, W, b), (vx, vW, vb))


# reductions ---------------------------------------------------------------


def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(
        np.asarray(out), (a,), (lambda g: _expand_grad(g, a.shape, axis, keepdims).copy(),)
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size / max(np.asarray(out).size, 1)
    return _make(
        np.asarray(out),
        (a,),
        (lambda g: _expand_grad(g, a.shape, axis, keepdims) / n,),
    )


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _make(np.cumsum(a.data, axis=axis), (a,), (vjp,))


# elementwise unary --------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), (lambda g: 2.0 * g * a.data,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), (lambda g: g * expit(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), (lambda g: g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, (a,), (vjp,))


def clip(a, lo, hi) -> Tensor:
    """Clamp values; gradient passes only where the input is inside the range."""
    a = as_tensor(a)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape),
            lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def l2_norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm ``sqrt(sum(a**2) + eps)`` along ``axis``."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True) + eps)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(out > 0, a.data / out, 0.0)
        return g * r

    val = out if keepdims else np.squeeze(out, axis=axis)
    return _make(val, (a,), (vjp,))


def normalize(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    return div(a, l2_norm(a, axis=axis, keepdims=True, eps=eps))


# structural ---------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def piece(i):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, ts, [piece(i) for i in range(len(ts))])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), (lambda g: g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), (lambda g: _unbroadcast(g, a.shape),))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` with an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index)

    def vjp(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if index.ndim == 1 else g)
        return full

    if index.ndim != 1 and axis != 0:
        raise ShapeError("take: multi-dimensional index only supported on axis 0")
    return _make(np.take(a.data, index, axis=axis), (a,), (vjp,))


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return full

    return _make(np.array(out), (a,), (vjp,))


# backward pass ------------------------------------------------------------


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to every leaf on its tape.

    Leaves unreachable from the root get zero gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.tracked:
        raise ValueError("backward: root is not recorded on a tape")
    nodes = root.tape.nodes
    grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape, dtype=root.data.dtype)}
    leaves: dict[int, np.ndarray] = {}
    for nid in range(root.node, -1, -1):
        g = grads.pop(nid, None)
        node = nodes[nid]
        if not node.vjps:
            if g is not None:
                leaves[nid] = np.asarray(g).reshape(node.shape)
            continue
        if g is None:
            continue
        for pid, fn in zip(node.parents, node.vjps):
            contrib = fn(g)
            if contrib.dtype != nodes[pid].dtype:
                contrib = contrib.astype(nodes[pid].dtype)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    for nid, node in enumerate(nodes):
        if not node.vjps and nid not in leaves:
            leaves[nid] = np.zeros(node.shape)
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|g_auto - g_fd| / max(1, |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x)
    out = f(xt)
    auto = backward(out)[xt.node]

    bad = []
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        fp = float(np.sum(f(Tensor(probe.reshape(x.shape))).data))
        probe[i] = flat[i] - eps
        fm = float(np.sum(f(Tensor(probe.reshape(x.shape))).data))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(np.unravel_index(i, x.shape))
            continue
        fd.reshape(-1)[i] = (fp - fm) / (2 * eps)
    if bad:
        raise NonFiniteProbe([tuple(int(v) for v in b) for b in bad])
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd)), initial=0.0))
