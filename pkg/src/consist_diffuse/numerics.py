"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result records its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` walks that graph in reverse topological
order and accumulates into the ``grad`` of every differentiable leaf.

Broadcasting is deliberately narrow: the second operand of an elementwise op
may be a scalar or have a shape equal to a trailing suffix of the first
operand's shape (bias-add along leading axes). Anything else is rejected.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Rng",
    "tensor",
    "constant",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "scalar_mul",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "square",
    "concat",
    "reshape",
    "index_select",
    "silu",
    "tanh",
    "mse",
    "backward",
    "sample_gaussian",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; results are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that can participate in a computation graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor shape must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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

    @property
    def grad(self) -> "Tensor | None":
        if self._grad is None:
            return None
        return Tensor(self._grad)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- broadcasting helpers ------------------------------------------------

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sb == () or sa == ():
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return Tensor._result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D or 2-D @ 1-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    if b.ndim == 1:
        return Tensor._result(ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,))


# -- reductions and structure ------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return Tensor._result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    orig = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def index_select(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"index_select: index out of range for shape {a.shape}")
    shape = a.shape

    def fn(g: np.ndarray):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    return Tensor._result(
        np.asarray(np.mean(diff * diff)),
        (a, b),
        lambda g: ((2.0 * float(g) / n) * diff, (-2.0 * float(g) / n) * diff),
    )


# -- reverse pass ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into every differentiable leaf reachable from ``loss``.

    The graph is retained, so calling this twice doubles the stored gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# -- randomness ------------------------------------------------------------------

class Rng:
    """Seeded random stream on the counter-based Philox bit generator.

    Identical seed and identical call sequence give an identical sample stream.
    ``child(key)`` derives an independent stream without touching this one's
    counter, which keeps per-item or per-phase draws reproducible.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence([self.seed, *self.key])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        return mean + std * self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def sample_gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """i.i.d. N(mean, std**2) samples as a non-differentiable tensor."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return Tensor(rng.normal(shape, mean, std))
