"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array; every operation that touches a tensor
requiring gradients records a node (parents + vector-Jacobian product) so a
single `backward` call on a scalar populates leaf gradients. First-order
only: no gradients of gradients are ever taken here.

Broadcasting follows numpy semantics; the backward pass sums gradients over
broadcast axes. A global strict flag makes ops raise `NumericError` instead
of silently producing NaN/Inf.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True
_STRICT = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def strict_numerics(enabled: bool = True):
    """Raise NumericError whenever an op would emit a non-finite value."""
    global _STRICT
    prev = _STRICT
    _STRICT = enabled
    try:
        yield
    finally:
        _STRICT = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _STRICT and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array, optionally tracked on the autodiff tape.

    `grad` is populated on leaves (tensors with no recorded parents) by
    `backward`; repeated backward calls accumulate unless grads are zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Wrap an op result, recording the node only when the tape is live."""
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def _broadcast_op(a: Tensor, b: Tensor, fn, vjp_a, vjp_b, op: str) -> Tensor:
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc
    def vjp(g):
        return (_unbroadcast(vjp_a(g), a.shape), _unbroadcast(vjp_b(g), b.shape))
    return _node(data, (a, b), vjp, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(
        a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, "mul"
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(
        a,
        b,
        np.divide,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    if _STRICT and np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    data = np.log(a.data)
    return _node(data, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if _STRICT and np.any(a.data < 0.0):
        raise NumericError("sqrt of negative value")
    data = np.sqrt(a.data)
    return _node(data, (a,), lambda g: (g * 0.5 / data,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    data = np.where(
        a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
        np.exp(np.minimum(a.data, 0)) / (1.0 + np.exp(np.minimum(a.data, 0))),
    )
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def power(a: Tensor, p: float) -> Tensor:
    """a**p; caller guarantees the domain (integer p, or positive base)."""
    data = a.data ** p
    _check_finite(data, "power")
    return _node(data, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,), "square")


# -- structural ops -----------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects 2-d, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose2d")


def swap_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last2 expects >=2-d, got {a.shape}")
    data = np.swapaxes(a.data, -1, -2).copy()
    return _node(data, (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last2")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes do not conform: {[t.shape for t in tensors]}") from exc
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2d@2d, batched Nd@Nd (equal batch dims), or Nd@2d."""
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.ndim == 1:
        # route vectors through a row matrix so the vjp stays uniform
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[-1],))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    _check_finite(data, "matmul")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(data, (a, b), vjp, "matmul")


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), vjp, "sum")


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


# -- composites (backward falls out of the primitives) ------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`; the max shift is a constant, which is exact."""
    shift = constant(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis if axis >= 0 else a.ndim + axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    shift = constant(np.max(a.data, axis=ax, keepdims=True))
    shifted = sub(a, shift)
    lse = log(sum_(exp(shifted), axis=ax, keepdims=True))
    return sub(shifted, lse)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    return sqrt(sum_(square(a), axis=ax, keepdims=keepdims))


def l2_normalize(a: Tensor, axis: int = -1, min_norm: float = 0.0) -> Tensor:
    """Rows scaled to unit norm; rows with norm <= min_norm raise."""
    norms = l2_norm(a, axis=axis, keepdims=True)
    if np.any(norms.data <= min_norm):
        raise NumericError("cannot normalize a zero-norm vector")
    return div(a, norms)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)),
                axis=axis if axis >= 0 else max(a.ndim, b.ndim) + axis)


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires-grad leaf reachable from `loss`.

    `loss` must be scalar (shape ()). Intermediate gradients are kept in a
    scratch map and discarded; leaf grads accumulate across calls.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # topological order, leaves first (iterative postorder DFS)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf: accumulate into .grad
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
