"""Dense float64 tensors with a tape-based reverse-mode autodiff and Adam.

Every tensor created from an operand that requires a gradient records its
parents and a closure computing the parents' adjoints.  The graph is rebuilt
on every forward pass; :meth:`Tensor.backward` walks it once in reverse
topological order.  Gradients are stored on leaf tensors only.

Binary operations require equal shapes.  The single exception is a Python
number or a 0-d tensor combined with a tensor of any shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class GradientError(RuntimeError):
    """Backward or optimizer preconditions are not met."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # -- operators -----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_binary(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-by-tensor broadcasting exists
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# -- binary elementwise ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


# -- unary elementwise -------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # two-branch form avoids overflow in exp for large |x|
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = np.logaddexp(0.0, x.data)

    def bw(g):
        z = np.exp(-np.abs(x.data))
        s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * s,)

    return _make(v, (x,), bw, "softplus")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "log": log,
    "exp": exp,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``relu``, ``log``, ...)."""
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes two operands, got {len(args)}")
        return _BINARY[kind](*args)
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes one operand, got {len(args)}")
        return _UNARY[kind](args[0])
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions and structure ------------------------------------------

def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = x.data.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_axis")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with ``bias`` of shape ``(1, out)`` added to every row."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (1, weight.shape[1]):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match (1, {weight.shape[1]})")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
        return gx, gw, gb

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), bw, "linear")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def take_rows(x, index) -> Tensor:
    """Select rows of a 2-D tensor by integer index."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "take_rows")


def rowwise_sq_distance(a, b) -> Tensor:
    """Squared Euclidean distance between aligned rows, shape ``(B, 1)``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("rowwise_sq_distance", a, b)
    diff = a.data - b.data

    def bw(g):
        ga = 2.0 * g * diff
        return ga, -ga

    return _make((diff * diff).sum(axis=1, keepdims=True), (a, b), bw, "sqdist")


def softmax_cross_entropy(logits, target_probs) -> Tensor:
    """Batch mean of ``-sum_i target_i * log_softmax(logits)_i``.

    Target rows may be one-hot, soft, or all zero (a zero row contributes 0).
    """
    logits, target_probs = as_tensor(logits), as_tensor(target_probs)
    if logits.ndim != 2 or logits.shape != target_probs.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {target_probs.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("softmax_cross_entropy needs at least two classes")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    t = target_probs.data
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(t * logp).sum() / n

    def bw(g):
        p = np.exp(logp)
        row_mass = t.sum(axis=1, keepdims=True)
        return (g * (p * row_mass - t) / n, None)

    return _make(np.asarray(loss), (logits, target_probs), bw, "softmax_xent")


# -- backward ----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
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


def sample_gaussian(shape, rng: np.random.Generator) -> Tensor:
    """I.i.d. standard normal constant (never part of the graph)."""
    return Tensor(rng.standard_normal(tuple(shape)))


# -- Adam --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, learning_rate: float = 4e-4, **kw) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), learning_rate=learning_rate, **kw)


def adam_step(param: Tensor, state: AdamState) -> None:
    """Bias-corrected Adam update in place; clears ``param.grad``."""
    if param.grad is None:
        raise GradientError("adam_step: parameter has no gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"adam_step: state shape {state.m.shape} vs parameter {param.shape}")
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    param.grad = None


@dataclass
class Adam:
    """One Adam optimizer over a list of parameters.

    Parameters without a gradient at step time are skipped (their moments
    and step counter stay untouched).
    """

    params: list[Tensor]
    learning_rate: float = 4e-4
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [AdamState.for_param(p, self.learning_rate) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p, s)
