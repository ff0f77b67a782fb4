"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation that sees a
tensor with ``requires_grad`` records a Node holding its inputs and a local
backward rule.  ``backward(loss)`` materializes the tape (a topological
ordering of the recorded nodes), walks it once in reverse, and accumulates
gradients into the ``grad`` buffers of the leaf tensors.  Gradients keep
accumulating across calls until the caller resets them.

Broadcasting is restricted to the trailing-axis rule: the second operand's
shape must be a suffix of the first operand's shape (a rank-0 scalar counts
as the empty suffix).  That covers bias adds and scalar scaling; anything
richer is rejected so backward rules stay a plain sum over leading axes.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DomainError,
    InvalidAxis,
    InvalidShape,
    NotScalar,
    ShapeMismatch,
)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Node:
    """One recorded operation: its input tensors and local backward rule.

    ``grad_fn`` maps the adjoint of the output to a tuple of adjoints,
    one per input (None for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op: str, inputs: tuple, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad: bool = False, node: Node | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; scalars lift to rank-0 constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return add(neg(self), _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.float64(x))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def apply_op(op: str, inputs: Sequence[Tensor], values: np.ndarray, grad_fn: Callable) -> Tensor:
    """Build the op's output tensor, recording a Node when gradients flow.

    ``grad_fn`` receives the output adjoint (ndarray) and must return one
    adjoint (or None) per input.  Exposed so higher layers can define fused
    differentiable ops (conv, pooling, losses) with the same machinery.
    """
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op, tuple(inputs), grad_fn)
        return Tensor(values, requires_grad=True, node=node)
    return Tensor(values)


# ---------------------------------------------------------------------------
# construction

def _check_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise InvalidShape("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise InvalidShape(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape)), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad=requires_grad)


def uniform(shape, lo: float, hi: float, seed, requires_grad: bool = False) -> Tensor:
    """Uniform values on [lo, hi); equal seeds give bit-identical tensors."""
    shape = _check_shape(shape)
    if hi < lo:
        raise DomainError(f"uniform bounds reversed: [{lo}, {hi})")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


def gaussian(shape, mu: float, sigma: float, seed, requires_grad: bool = False) -> Tensor:
    shape = _check_shape(shape)
    if sigma < 0:
        raise DomainError(f"negative sigma {sigma}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.normal(mu, sigma, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _suffix_axes(a_shape: tuple, b_shape: tuple) -> tuple:
    """Validate trailing-axis broadcast of b onto a; return b's summed axes."""
    if a_shape == b_shape:
        return ()
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return tuple(range(len(a_shape) - len(b_shape)))
    raise ShapeMismatch(
        f"shape {b_shape} is not a trailing suffix of {a_shape}"
    )


def _reduce_to(grad: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    if not axes:
        return grad
    return grad.sum(axis=axes)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_axes(a.shape, b.shape)
    out = a.values + b.values

    def grad_fn(g):
        return g, _reduce_to(g, b.shape, axes)

    return apply_op("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_axes(a.shape, b.shape)
    out = a.values - b.values

    def grad_fn(g):
        return g, -_reduce_to(g, b.shape, axes)

    return apply_op("sub", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_axes(a.shape, b.shape)
    av, bv = a.values, b.values
    out = av * bv

    def grad_fn(g):
        return g * bv, _reduce_to(g * av, b.shape, axes)

    return apply_op("mul", (a, b), out, grad_fn)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.values, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    av = a.values
    return apply_op("log", (a,), np.log(av), lambda g: (g / av,))


def powc(a: Tensor, c: float) -> Tensor:
    """a ** c for a non-negative constant exponent."""
    if c < 0:
        raise DomainError(f"negative exponent {c}")
    av = a.values
    out = av ** c

    def grad_fn(g):
        if c == 0.0:
            return (np.zeros_like(av),)
        return (g * c * av ** (c - 1.0),)

    return apply_op("powc", (a,), out, grad_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through inside the interval."""
    if hi < lo:
        raise DomainError(f"clamp bounds reversed: [{lo}, {hi}]")
    av = a.values
    out = np.clip(av, lo, hi)
    inside = ((av >= lo) & (av <= hi)).astype(np.float64)
    return apply_op("clamp", (a,), out, lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    av = a.values
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    out[~pos] = ev / (1.0 + ev)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (a,), out, grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:
    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))."""
    x = a.values
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return apply_op("gelu", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {av.shape} @ {bv.shape}")

    if av.ndim == bv.ndim:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ShapeMismatch(f"batch dimensions differ: {av.shape} @ {bv.shape}")
        out = av @ bv

        def grad_fn(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

        return apply_op("matmul", (a, b), out, grad_fn)

    if bv.ndim == 2:
        out = av @ bv

        def grad_fn(g):
            da = g @ bv.T
            k = av.shape[-1]
            n = bv.shape[-1]
            db = av.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db

        return apply_op("matmul", (a, b), out, grad_fn)

    raise ShapeMismatch(f"unsupported matmul ranks: {av.shape} @ {bv.shape}")


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = []
    for ax in axis:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise InvalidAxis(f"repeated axis in {axis}")
    return tuple(sorted(axes))


def _expand_back(g: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    out_shape = list(shape)
    for ax in axes:
        out_shape[ax] = 1
    return np.broadcast_to(g.reshape(out_shape), shape)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.values.ndim)
    out = a.values.sum(axis=axes)

    def grad_fn(g):
        return (_expand_back(g, a.shape, axes).copy(),)

    return apply_op("sum", (a,), out, grad_fn)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.values.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.values.mean(axis=axes)

    def grad_fn(g):
        return (_expand_back(g, a.shape, axes) / count,)

    return apply_op("mean", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# normalization

def sorted_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Sum along one axis, order-independently.

    Summands are sorted by value first, so any permutation of the inputs
    along the axis produces bit-identical results.  Used where the forward
    pass must be exactly equivariant under token permutation.
    """
    return np.sum(np.sort(values, axis=axis), axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ndim = a.values.ndim
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    shifted = a.values - a.values.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    denom = np.expand_dims(sorted_sum(e, ax), ax)
    out = e / denom

    def grad_fn(g):
        dot = np.sum(g * out, axis=ax, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", (a,), out, grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature."""
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    n = a.shape[-1] if a.values.ndim else 0
    if a.values.ndim < 1:
        raise InvalidShape("layer_norm input must have rank >= 1")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(
            f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    out = gain.values * xhat + bias.values

    def grad_fn(g):
        gg = g * gain.values
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        return dx, dgain, dbias

    return apply_op("layer_norm", (a, gain, bias), out, grad_fn)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape) if not isinstance(shape, (int, np.integer)) else (int(shape),)
    count = 1
    for d in shape:
        if d < 0:
            raise InvalidShape(f"negative dimension in {shape}")
        count *= d
    if count != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    old = a.shape
    out = a.values.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return apply_op("reshape", (a,), out, grad_fn)


def transpose2d(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.values.ndim < 2:
        raise InvalidShape(f"transpose2d needs rank >= 2, got {a.shape}")
    out = np.swapaxes(a.values, -1, -2)

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return apply_op("transpose2d", (a,), out, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidShape("concat of zero tensors")
    ndim = tensors[0].values.ndim
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.values.ndim != ndim:
            raise ShapeMismatch("concat inputs must share rank")
        other = list(t.shape)
        if base[:ax] + base[ax + 1:] != other[:ax] + other[ax + 1:]:
            raise ShapeMismatch(f"concat shapes differ off-axis: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=ax)
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    return apply_op("concat", tuple(tensors), out, grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ndim = a.values.ndim
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise InvalidShape(f"slice [{start}:{stop}) invalid for axis length {n}")
    index = tuple(slice(None) if i != ax else slice(start, stop) for i in range(ndim))
    out = a.values[index].copy()

    def grad_fn(g):
        full_grad = np.zeros_like(a.values)
        full_grad[index] = g
        return (full_grad,)

    return apply_op("slice", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# backward

class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, order: list):
        self.order = order  # tensors with nodes; inputs precede consumers

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack: list = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf tensor."""
    if loss.values.size != 1:
        raise NotScalar(f"backward root must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.values)
            loss.grad += np.ones_like(loss.values)
        return
    tape = Tape.from_root(loss)
    adjoint: dict = {id(loss): np.ones_like(loss.values)}
    for t in reversed(tape.order):
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        input_grads = t.node.grad_fn(g)
        for inp, gin in zip(t.node.inputs, input_grads):
            if gin is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gin if prev is None else prev + gin
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.values)
                inp.grad += gin


# ---------------------------------------------------------------------------
# gradient verification

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare backward() against central finite differences.

    Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    ``f`` must map a tensor to a scalar tensor and be free of side effects.
    """
    leaf = Tensor(x.values.copy(), requires_grad=True)
    out = f(leaf)
    if out.values.size != 1:
        raise NotScalar(f"finite_diff_check needs a scalar function, got {out.shape}")
    backward(out)
    analytic = (np.zeros_like(leaf.values) if leaf.grad is None else leaf.grad).ravel()

    flat = x.values.ravel()
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - h
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
