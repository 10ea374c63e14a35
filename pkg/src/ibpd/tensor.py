"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its operands and a
backward rule.  :func:`backward` collects the nodes reachable from a scalar
loss, orders them by creation sequence and replays the rules in exact
reverse order.  Leaf tensors with ``requires_grad`` accumulate into ``.grad``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Parameter",
    "ComputationRecord",
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "NondeterminismError",
    "as_tensor",
    "matmul",
    "elementwise",
    "activation",
    "reduce",
    "concat",
    "cumsum",
    "clip",
    "logsumexp",
    "no_grad",
    "record",
    "backward",
    "gradient_check",
]

_sequence = itertools.count()
_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operands (per thread)."""
    previous = getattr(_mode, "enabled", True)
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of a function (e.g. log of a non-positive)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class NondeterminismError(RuntimeError):
    """Two evaluations of the same function disagreed."""


class Tensor:
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op: str | None = None
        self._seq = next(_sequence)

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
    def T(self) -> Tensor:
        return self.transpose()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # arithmetic sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __pow__(self, other):
        return elementwise("pow", self, other)

    def __rpow__(self, other):
        return elementwise("pow", other, self)

    def __neg__(self):
        return activation("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def exp(self):
        return activation("exp", self)

    def log(self):
        return activation("log", self)

    def sigmoid(self):
        return activation("sigmoid", self)

    def tanh(self):
        return activation("tanh", self)

    def relu(self):
        return activation("relu", self)

    def softplus(self):
        return activation("softplus", self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self) -> Tensor:
        if self.ndim != 2:
            raise DimensionError(f"transpose expects a 2-d tensor, got shape {self.shape}")
        return _node(self.data.T.copy(), (self,), lambda g: (g.T,), "transpose")


class Parameter(Tensor):
    """A named, always-trainable leaf tensor."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = getattr(_mode, "enabled", True) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._rule = rule
    else:
        out._parents = ()
        out._rule = None
    out._seq = next(_sequence)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def rule(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, (a, b), rule, "matmul")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Binary elementwise op with trailing-dimension broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape} for '{op_kind}'") from None
    av, bv = a.data, b.data
    sa, sb = a.shape, b.shape

    if op_kind == "add":
        out = av + bv
        rule = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif op_kind == "sub":
        out = av - bv
        rule = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif op_kind == "mul":
        out = av * bv
        rule = lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    elif op_kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = av / bv
        rule = lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * av / bv**2, sb))
    elif op_kind == "pow":
        if b.requires_grad and np.any(av <= 0):
            raise DomainError("pow with a differentiable exponent needs a strictly positive base")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = av**bv

        def rule(g):
            ga = _unbroadcast(g * bv * av ** (bv - 1.0), sa) if a.requires_grad else None
            gb = _unbroadcast(g * out * np.log(av), sb) if b.requires_grad else None
            return ga, gb
    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return _node(np.asarray(out, dtype=np.float64), (a, b), rule, op_kind)


def activation(kind: str, a) -> Tensor:
    """Unary nonlinearity.  Besides the usual kinds, ``lgamma`` and ``digamma``
    are available for Beta-function algebra."""
    a = as_tensor(a)
    x = a.data
    if kind == "sigmoid":
        out = special.expit(x)
        rule = lambda g: (g * out * (1.0 - out),)
    elif kind == "tanh":
        out = np.tanh(x)
        rule = lambda g: (g * (1.0 - out**2),)
    elif kind == "relu":
        out = np.maximum(x, 0.0)
        rule = lambda g: (g * (x > 0),)
    elif kind == "softplus":
        out = np.logaddexp(0.0, x)
        rule = lambda g: (g * special.expit(x),)
    elif kind == "exp":
        out = np.exp(x)
        rule = lambda g: (g * out,)
    elif kind == "log":
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive value (min {x.min():.3g})")
        out = np.log(x)
        rule = lambda g: (g / x,)
    elif kind == "expm1":
        out = np.expm1(x)
        rule = lambda g: (g * (out + 1.0),)
    elif kind == "log1p":
        if np.any(x <= -1):
            raise DomainError("log1p of a value <= -1")
        out = np.log1p(x)
        rule = lambda g: (g / (1.0 + x),)
    elif kind == "neg":
        out = -x
        rule = lambda g: (-g,)
    elif kind == "lgamma":
        if np.any(x <= 0):
            raise DomainError("lgamma is only defined here for positive inputs")
        out = special.gammaln(x)
        rule = lambda g: (g * special.digamma(x),)
    elif kind == "digamma":
        if np.any(x <= 0):
            raise DomainError("digamma is only defined here for positive inputs")
        out = special.digamma(x)
        rule = lambda g: (g * special.polygamma(1, x),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _node(np.asarray(out, dtype=np.float64), (a,), rule, kind)


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    if not isinstance(axis, (int, np.integer)) or not -a.ndim <= axis < max(a.ndim, 1):
        raise DimensionError(f"invalid axis {axis} for shape {a.shape}")
    return int(axis) % a.ndim


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over one axis or everything.

    Max routes its gradient to the first (lowest-index) maximiser.
    """
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    x = a.data
    shape = a.shape

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g

    if kind == "sum":
        out = x.sum(axis=axis, keepdims=keepdims)
        rule = lambda g: (np.broadcast_to(expand(g), shape).copy(),)
    elif kind == "mean":
        count = x.size if axis is None else x.shape[axis]
        out = x.mean(axis=axis, keepdims=keepdims)
        rule = lambda g: (np.broadcast_to(expand(g), shape) / count,)
    elif kind == "max":
        if x.size == 0:
            raise DimensionError("max of an empty tensor")
        out = x.max(axis=axis, keepdims=keepdims)

        def rule(g):
            grad = np.zeros(shape)
            if axis is None:
                grad.flat[np.argmax(x)] = g
            else:
                idx = np.expand_dims(np.argmax(x, axis=axis), axis)
                np.put_along_axis(grad, idx, expand(g), axis=axis)
            return (grad,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _node(np.asarray(out, dtype=np.float64), (a,), rule, kind)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, rule, "concat")


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)

    def rule(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.data, axis=axis), (a,), rule, "cumsum")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    x = a.data
    out = special.logsumexp(x, axis=axis)
    soft = np.exp(x - np.expand_dims(out, axis))
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


@dataclass
class ComputationRecord:
    """Nodes reachable from an output, in creation order."""

    nodes: list[Tensor]

    def __len__(self) -> int:
        return len(self.nodes)


def record(output: Tensor) -> ComputationRecord:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return ComputationRecord(sorted(seen.values(), key=lambda t: t._seq))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.shape != ():
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(record(loss).nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._rule is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def gradient_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    The error per scalar is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must rebuild its graph on every call from the current parameter data.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    first, second = f().data.copy(), f().data.copy()
    if not np.array_equal(first, second):
        raise NondeterminismError("f returned different values for identical parameters")
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().item()
            p.data[idx] = orig - h
            down = f().item()
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
