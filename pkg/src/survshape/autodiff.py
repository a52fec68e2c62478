"""Small reverse-mode automatic differentiation engine on top of numpy.

Every tensor holds a float64 array. Operations record their inputs and a
closure that maps the output gradient to input gradients; ``backward`` walks
the recorded graph in reverse topological order. The graph is rebuilt on every
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector along the last axis of ``a``."""
    a, bias = as_tensor(a), as_tensor(bias)
    if bias.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias of shape {bias.shape} does not match input {a.shape}")

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(a.data + bias.data, (a, bias), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold the leading axes so the weight gradient is one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw_shared(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make((a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1]), (a, b), bw_shared)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw)


def set_max_pool(a: Tensor, axis: int = -2) -> Tensor:
    """Maximum over the set axis (rows of a K x d matrix by default).

    The backward pass sends each output gradient to the first row that
    attains the maximum.
    """
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"set_max_pool: need at least 2 dimensions, got {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("set_max_pool: empty set")
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def create(cls, num_features: int) -> "BatchNormState":
        return cls(np.zeros(num_features), np.ones(num_features))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Normalize the features on the last axis.

    Statistics are taken over every leading axis, so a ``(clouds, points,
    features)`` input is normalized over all points of all clouds in the
    batch. Running statistics are updated in training mode only; eval mode
    uses them exclusively.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: expected a (batch, features) input, got {x.shape}")
    nfeat = x.shape[-1]
    if gamma.shape != (nfeat,) or beta.shape != (nfeat,):
        raise ShapeError(f"batch_norm: scale/shift shapes {gamma.shape}, {beta.shape} do not match {nfeat} features")
    eps = state.eps
    x2 = x.data.reshape(-1, nfeat)

    if not training:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x2 - state.running_mean) * inv
        out = xhat * gamma.data + beta.data

        def bw_eval(g):
            g2 = g.reshape(-1, nfeat)
            gx = g2 * (gamma.data * inv)
            return gx.reshape(x.shape), np.einsum("nf,nf->f", g2, xhat), g2.sum(axis=0)

        return _make(out.reshape(x.shape), (x, gamma, beta), bw_eval)

    n = x2.shape[0]
    if n < 2:
        raise ValueError("batch_norm: train mode needs at least 2 samples per batch (variance is degenerate)")
    # einsum reductions and in-place updates keep large temporaries to a minimum
    mu = x2.mean(axis=0)
    xhat = x2 - mu
    var = np.einsum("nf,nf->f", xhat, xhat) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    m = state.momentum
    state.running_mean = m * state.running_mean + (1.0 - m) * mu
    state.running_var = m * state.running_var + (1.0 - m) * var * (n / (n - 1))

    def bw_train(g):
        g2 = g.reshape(-1, nfeat)
        gx = g2 * gamma.data
        proj = np.einsum("nf,nf->f", gx, xhat) / n
        gx -= gx.mean(axis=0)
        gx -= xhat * proj
        gx *= inv
        return gx.reshape(x.shape), np.einsum("nf,nf->f", g2, xhat), g2.sum(axis=0)

    out = out.reshape(x.shape)
    return _make(out, (x, gamma, beta), bw_train)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def custom_op(inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap a hand-written forward result with its gradient rule."""
    return _make(np.asarray(out, dtype=np.float64), tuple(as_tensor(t) for t in inputs), backward_fn)
