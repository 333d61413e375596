"""Dense matrix kernel with tape-based reverse-mode differentiation.

Everything is a 2-D float64 matrix: scalars are (1, 1), row vectors (1, n).
`Tensor` records the operations that produced it as backward closures; calling
:func:`backward` on a scalar tensor populates `.grad` on every upstream node
that requires gradients. Constants (``requires_grad=False`` with no
differentiable parents) are not taped, so pure inference builds no graph.

Values are plain ``numpy`` arrays; only the tape itself is implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericError

Array = np.ndarray


def _as_matrix(value) -> Array:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    elif v.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {v.shape}")
    return v


class Tensor:
    """A matrix-valued node in the computation tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad: bool = False,
                 _parents: tuple = (), _backprop: Callable[[], None] | None = None):
        self.value = _as_matrix(value)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backprop = _backprop

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars (Python floats/ints) act elementwise.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor: gradient is always allocated and zeroed on creation."""

    def __init__(self, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.grad = np.zeros_like(self.value)
        if not np.isfinite(self.value).all():
            raise NumericError("parameter initialized with non-finite values")

    @property
    def trainable(self) -> bool:
        return self.requires_grad


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def zero_gradients(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 2
            order.append(node)
            continue
        mark = state.get(nid)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in recorded computation graph")
        state[nid] = 1
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) == 1:
                raise GraphError("cycle detected in recorded computation graph")
            if state.get(id(parent)) != 2:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every trainable ancestor of a scalar loss."""
    if loss.value.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise NumericError("backward called on a non-finite loss")
    order = _toposort(loss)
    loss.accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop()


def _binary_parents(a: Tensor, b: Tensor) -> tuple[bool, tuple]:
    rg = a.requires_grad or b.requires_grad
    return rg, (a, b) if rg else ()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    rg, parents = _binary_parents(a, b)
    out = Tensor(a.value @ b.value, rg, parents)

    if rg:
        def backprop():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g @ b.value.T)
            if b.requires_grad:
                b.accumulate(a.value.T @ g)
        out._backprop = backprop
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a (1, n) row broadcast over `a`'s rows."""
    broadcast = b.shape != a.shape
    if broadcast and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    rg, parents = _binary_parents(a, b)
    out = Tensor(a.value + b.value, rg, parents)

    if rg:
        def backprop():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0, keepdims=True) if broadcast else g)
        out._backprop = backprop
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    rg, parents = _binary_parents(a, b)
    out = Tensor(a.value * b.value, rg, parents)

    if rg:
        def backprop():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g * b.value)
            if b.requires_grad:
                b.accumulate(g * a.value)
        out._backprop = backprop
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"div shape mismatch: {a.shape} / {b.shape}")
    rg, parents = _binary_parents(a, b)
    out = Tensor(a.value / b.value, rg, parents)

    if rg:
        def backprop():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g / b.value)
            if b.requires_grad:
                b.accumulate(-g * a.value / (b.value * b.value))
        out._backprop = backprop
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * c, a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad * c)
    return out


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value + c, a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.value.T, a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad.T)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.value.sum(), a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(np.full_like(a.value, out.grad[0, 0]))
    return out


def sum_rows(a: Tensor) -> Tensor:
    """Row sums as an (m, 1) column."""
    out = Tensor(a.value.sum(axis=1, keepdims=True), a.requires_grad,
                 (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(np.broadcast_to(out.grad, a.shape).copy())
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def sigmoid(a: Tensor) -> Tensor:
    v = a.value
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(y, a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad * y * (1.0 - y))
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^{-|x|})."""
    v = a.value
    out = Tensor(np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))),
                 a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        sig = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                       np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        out._backprop = lambda: a.accumulate(out.grad * sig)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    out = Tensor(np.log(a.value), a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad / a.value)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.value, 0.0), a.requires_grad, (a,) if a.requires_grad else ())
    if a.requires_grad:
        out._backprop = lambda: a.accumulate(out.grad * (a.value > 0))
    return out


def softmax_rows(m: Tensor, temperature: float = 1.0, mask: Array | None = None) -> Tensor:
    """Row-wise softmax of ``m / temperature`` with max-subtraction.

    `mask` (optional boolean array, True = position participates) implements
    masked attention: excluded entries get exactly zero weight. A fully masked
    row has no valid normalization and raises; callers provide a fallback.
    """
    if temperature <= 0:
        raise NumericError(f"softmax temperature must be positive, got {temperature}")
    if not np.isfinite(m.value).all():
        raise NumericError("softmax of non-finite input")
    z = m.value / temperature
    if mask is not None:
        if mask.shape != m.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != input {m.shape}")
        if not mask.any(axis=1).all():
            raise NumericError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, m.requires_grad, (m,) if m.requires_grad else ())

    if m.requires_grad:
        def backprop():
            g = out.grad
            inner = (g * y).sum(axis=1, keepdims=True)
            m.accumulate(y * (g - inner) / temperature)
        out._backprop = backprop
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by elementwise affine (gain/bias are (1, D))."""
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise DimensionError("layer norm gain/bias must be (1, D) rows")
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    rg = x.requires_grad or gain.requires_grad or bias.requires_grad
    out = Tensor(xhat * gain.value + bias.value, rg, (x, gain, bias) if rg else ())

    if rg:
        def backprop():
            g = out.grad
            if gain.requires_grad:
                gain.accumulate((g * xhat).sum(axis=0, keepdims=True))
            if bias.requires_grad:
                bias.accumulate(g.sum(axis=0, keepdims=True))
            if x.requires_grad:
                gx = g * gain.value
                n = x.shape[1]
                term = gx - gx.mean(axis=1, keepdims=True) \
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True)
                x.accumulate(term * inv)
        out._backprop = backprop
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.value / norm
    out = Tensor(y, x.requires_grad, (x,) if x.requires_grad else ())

    if x.requires_grad:
        def backprop():
            g = out.grad
            inner = (g * y).sum(axis=1, keepdims=True)
            x.accumulate((g - y * inner) / norm)
        out._backprop = backprop
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} | {b.shape}")
    rg, parents = _binary_parents(a, b)
    out = Tensor(np.concatenate([a.value, b.value], axis=1), rg, parents)

    if rg:
        na = a.shape[1]

        def backprop():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g[:, :na])
            if b.requires_grad:
                b.accumulate(g[:, na:])
        out._backprop = backprop
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.value[:, start:stop].copy(), a.requires_grad,
                 (a,) if a.requires_grad else ())

    if a.requires_grad:
        def backprop():
            g = np.zeros_like(a.value)
            g[:, start:stop] = out.grad
            a.accumulate(g)
        out._backprop = backprop
    return out


@dataclass
class LinearParams:
    """Weight (in, out) plus bias row (1, out) for an affine projection."""
    weight: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return add(matmul(x, p.weight), p.bias)


def linear_params(rng: np.random.Generator, dim_in: int, dim_out: int,
                  weight_scale: float | None = None) -> LinearParams:
    scale_ = weight_scale if weight_scale is not None else 1.0 / np.sqrt(dim_in)
    w = Parameter(rng.normal(0.0, scale_, size=(dim_in, dim_out)))
    b = Parameter(np.zeros((1, dim_out)))
    return LinearParams(w, b)


def identity_linear(dim: int) -> LinearParams:
    return LinearParams(Parameter(np.eye(dim)), Parameter(np.zeros((1, dim))))


def finite_difference_gradient(f: Callable[[Parameter], float], p: Parameter,
                               h: float = 1e-4) -> Array:
    """Central-difference estimate of d f / d p, elementwise."""
    if h <= 0:
        raise NumericError(f"finite difference step must be positive, got {h}")
    grad = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(p)
        flat[i] = orig - h
        lo = f(p)
        flat[i] = orig
        hi = hi.item() if isinstance(hi, Tensor) else float(hi)
        lo = lo.item() if isinstance(lo, Tensor) else float(lo)
        out[i] = (hi - lo) / (2.0 * h)
    return grad
