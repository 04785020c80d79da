"""Dense tensors with a reverse-mode tape.

Every encoder block and the ranking loss are composed from the primitives in
this module, so a single finite-difference checker covers the whole model.
Tensors wrap numpy arrays; float64 is used for gradient verification and
float32 for training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

L2_EPS = 1e-12

_state = {"grad_enabled": True, "check_finite": True}


class NumericalError(ArithmeticError):
    """Raised when a NaN or Inf shows up in a tensor or a gradient."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording graph nodes."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        if _state["check_finite"] and not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in tensor {name or ''} of shape {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar; all of these route through the primitives below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    active = x.data > 0
    return _node(np.where(active, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * active,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bwd)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W + b, broadcast over the leading dims of x."""
    x, W = _lift(x), _lift(W)
    if W.ndim != 2:
        raise ValueError(f"affine weight must be 2-d, got {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"affine bias shape {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    xd, Wd = x.data.reshape(-1, W.shape[0]), W.data
    y = xd @ Wd
    if b is not None:
        y = y + b.data

    def bwd(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(x.shape)
        gW = xd.T @ g2
        return (gx, gW) if b is None else (gx, gW, g2.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _node(y.reshape(*lead, Wd.shape[1]), parents, bwd)


# -- normalizations -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """x / max(||x||, eps) along axis; zero vectors stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    y = xd / denom

    def bwd(g):
        # below eps the map is linear: y = x / eps
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - y * proj) / denom),)

    return _node(y, (x,), bwd)


# -- reductions and shape ops -----------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(y), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    ax = axis % xs[0].ndim
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    y = np.concatenate([x.data for x in xs], axis=ax)
    return _node(y, tuple(xs), lambda g: tuple(np.split(g, splits, axis=ax)))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.asarray(x.data[index]), (x,), bwd)


def diagonal(x: Tensor) -> Tensor:
    """Main diagonal of a square matrix."""
    n = x.shape[0]
    return getitem(x, (np.arange(n), np.arange(n)))


# -- backward -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into the grad slot of every requires_grad leaf.

    Leaves listed in ``wrt`` that the loss does not depend on get a zero
    gradient. The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph has already been consumed by a previous backward call")
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad and g is not None:
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._released = True


# -- finite differences -------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), componentwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
    grad_transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences for every input component.

    ``f`` receives the input tensors positionally and must return a scalar.
    ``grad_transform`` is applied to the analytic gradients before the
    comparison; it exists for fault-injection tests.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(*xs)
    backward(loss, wrt=xs)
    analytic = [t.grad.copy() for t in xs]
    if grad_transform is not None:
        analytic = [grad_transform(a) for a in analytic]

    numeric = []
    with no_grad():
        for t in xs:
            num = np.zeros_like(t.data)
            flat, nflat = t.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*xs).item()
                flat[i] = orig - h
                fm = f(*xs).item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            numeric.append(num)

    errs = [relative_error(a, n, floor).max(initial=0.0) for a, n in zip(analytic, numeric)]
    worst = float(max(errs, default=0.0))
    return GradCheckReport(worst <= tol, worst, analytic, numeric)
