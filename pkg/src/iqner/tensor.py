"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the encoder, prediction heads, and losses need: a small set of
differentiable operations over numpy arrays, a single-sweep backward pass,
and a central-difference gradient checker. CPU only, 64-bit only.

Operations take the fast path when no operand is tracked (or inside
``no_grad``): they return a bare value without recording a gradient rule.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "DegenerateRowError",
    "NumericError",
    "parameter",
    "no_grad",
    "add",
    "sub",
    "neg",
    "mul",
    "divide",
    "matmul",
    "linear",
    "bce_with_logits",
    "softmax_cross_entropy",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "take_rows",
    "row_softmax",
    "row_log_softmax",
    "layer_norm",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row contained no finite entry."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class Tensor:
    """A dense float64 array plus optional gradient.

    ``tracked`` tensors participate in differentiation: operations consuming
    them record a gradient rule, and :func:`backward` deposits ``grad`` on
    every tracked leaf. Untracked tensors are plain values.
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_grad_fn")

    def __init__(self, data, tracked: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.grad: np.ndarray | None = None
        self.tracked = tracked
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the graph."""
        out = _untracked(self.data)
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

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
        return divide(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, rng: np.random.Generator | None = None, std: float | None = None) -> Tensor:
    """A tracked leaf tensor; optionally sampled N(0, std) of the given shape."""
    if rng is not None:
        if std is None:
            raise ValueError("std required when sampling a parameter")
        data = rng.normal(0.0, std, size=data)
    return Tensor(data, tracked=True)


_GRAD_ENABLED = [True]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable gradient recording inside the block (fast plain-value math)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _untracked(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tracked = False
    out._parents = ()
    out._grad_fn = None
    return out


def _tracked(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tracked = True
    out._parents = parents
    out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not (_GRAD_ENABLED[-1] and (a.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.tracked else None,
            _unbroadcast(g, b.shape) if b.tracked else None,
        )

    return _tracked(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not (_GRAD_ENABLED[-1] and (a.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.tracked else None,
            _unbroadcast(-g, b.shape) if b.tracked else None,
        )

    return _tracked(data, (a, b), grad_fn)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    data = -x.data
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not (_GRAD_ENABLED[-1] and (a.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.tracked else None,
            _unbroadcast(g * a.data, b.shape) if b.tracked else None,
        )

    return _tracked(data, (a, b), grad_fn)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"divide: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not (_GRAD_ENABLED[-1] and (a.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.tracked else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.tracked else None,
        )

    return _tracked(data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    data = a.data @ b.data
    if not (_GRAD_ENABLED[-1] and (a.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            g @ b.data.T if a.tracked else None,
            a.data.T @ g if b.tracked else None,
        )

    return _tracked(data, (a, b), grad_fn)


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b for a matrix x, matrix w, and vector bias b."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {w.shape} are not compatible")
    data = x.data @ w.data + b.data
    if not (_GRAD_ENABLED[-1] and (x.tracked or w.tracked or b.tracked)):
        return _untracked(data)

    def grad_fn(g):
        return (
            g @ w.data.T if x.tracked else None,
            x.data.T @ g if w.tracked else None,
            _unbroadcast(g, b.shape) if b.tracked else None,
        )

    return _tracked(data, (x, w, b), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (g * (x.data > 0.0),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(y)
    return _tracked(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = _as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (g * _stable_sigmoid(x.data),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(y)
    return _tracked(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.data)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(y)
    return _tracked(y, (x,), lambda g: (g / (2.0 * y),))


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum over an axis (or everything when axis is None)."""
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).copy(),)

    return _tracked(data, (x,), grad_fn)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    data = x.data.T
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)
    return _tracked(data, (x,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    if not (_GRAD_ENABLED[-1] and any(p.tracked for p in parts)):
        return _untracked(data)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if p.tracked else None for p, piece in zip(parts, pieces))

    return _tracked(data, parts, grad_fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index]
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)

    def grad_fn(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _tracked(data, (x,), grad_fn)


def take_rows(x, ids) -> Tensor:
    """Gather rows of a matrix by integer index (embedding lookup)."""
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.intp)
    data = x.data[ids]
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)

    def grad_fn(g):
        full = np.zeros(x.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _tracked(data, (x,), grad_fn)


def bce_with_logits(logits, targets, row_mask=None) -> Tensor:
    """Summed binary cross entropy from logits against {0,1} targets.

    Computed as t*softplus(-z) + (1-t)*softplus(z), which never overflows
    and is exactly zero at saturated correct logits. ``row_mask`` (rows x 1)
    excludes rows from the sum.
    """
    z = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"bce targets {t.shape} do not match logits {z.shape}")
    mask = None if row_mask is None else np.asarray(row_mask, dtype=np.float64)
    per = t * np.logaddexp(0.0, -z.data) + (1.0 - t) * np.logaddexp(0.0, z.data)
    if mask is not None:
        per = per * mask
    data = per.sum()
    if not (_GRAD_ENABLED[-1] and z.tracked):
        return _untracked(data)

    def grad_fn(g):
        gz = g * (_stable_sigmoid(z.data) - t)
        if mask is not None:
            gz = gz * mask
        return (gz,)

    return _tracked(data, (z,), grad_fn)


def softmax_cross_entropy(logits, one_hot) -> Tensor:
    """Summed cross entropy of row-softmax(logits) against one-hot targets."""
    z = _as_tensor(logits)
    t = np.asarray(one_hot, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {z.shape}")
    m = np.max(z.data, axis=-1, keepdims=True)
    _check_rows_finite_max(m)
    shifted = z.data - m
    lse = m + np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = (t * (lse - z.data)).sum()
    if not (_GRAD_ENABLED[-1] and z.tracked):
        return _untracked(data)

    def grad_fn(g):
        soft = np.exp(z.data - lse)
        return (g * (soft * t.sum(axis=-1, keepdims=True) - t),)

    return _tracked(data, (z,), grad_fn)


# ---------------------------------------------------------------------------
# row-wise softmax family


def _check_rows_finite_max(m: np.ndarray) -> None:
    if np.any(np.isneginf(m)):
        raise DegenerateRowError("softmax row with every entry masked to -inf")


def row_softmax(x) -> Tensor:
    """Softmax over the last axis; -inf entries come out exactly 0."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    _check_rows_finite_max(m)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(y)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _tracked(y, (x,), grad_fn)


def row_log_softmax(x) -> Tensor:
    """Log-softmax over the last axis, stabilized by max subtraction."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    _check_rows_finite_max(m)
    shifted = x.data - m
    lse = m + np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = x.data - lse
    if not (_GRAD_ENABLED[-1] and x.tracked):
        return _untracked(data)

    def grad_fn(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _tracked(data, (x,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then rescale."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(
            f"layer_norm: parameters {gamma.shape}/{beta.shape} do not match width {h}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gamma.data + beta.data
    if not (_GRAD_ENABLED[-1] and (x.tracked or gamma.tracked or beta.tracked)):
        return _untracked(data)

    def grad_fn(g):
        if x.tracked:
            dy = g * gamma.data
            mean_dy = dy.mean(axis=-1, keepdims=True)
            mean_dyy = (dy * y).mean(axis=-1, keepdims=True)
            gx = (dy - mean_dy - y * mean_dyy) * inv
        else:
            gx = None
        ggamma = _unbroadcast(g * y, gamma.shape) if gamma.tracked else None
        gbeta = _unbroadcast(g, beta.shape) if beta.tracked else None
        return (gx, ggamma, gbeta)

    return _tracked(data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# reverse sweep


class ComputationRecord:
    """Topologically ordered trace of the operations below one output tensor.

    Every operation appears after all producers of its inputs, so a single
    reverse iteration propagates gradients correctly.
    """

    __slots__ = ("ops",)

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, Iterator[Tensor]]] = [(root, iter(root._parents))]
        seen.add(id(root))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen and p.tracked:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    Repeated calls without zeroing the grads sum their contributions.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise DimensionError(f"backward requires a scalar tensor, got shape {shape}")
    if not loss.tracked:
        return
    record = ComputationRecord.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(record.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float) -> float:
    """Max relative error between backward() and central differences at ``point``.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). ``f`` must return a scalar tensor and
    may read ``point`` directly; its data is perturbed in place and restored.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not point.tracked:
        raise ValueError("grad_check point must be tracked")
    point.zero_grad()
    out = f(point)
    if out.ndim != 0:
        raise DimensionError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise NumericError("grad_check: function value is not finite")
    backward(out)
    analytic = point.grad.reshape(-1).copy() if point.grad is not None else np.zeros(point.size)
    flat = point.data.reshape(-1)
    numeric = np.zeros_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(point).data)
            flat[i] = orig - eps
            lo = float(f(point).data)
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError("grad_check: perturbed evaluation is not finite")
            numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
