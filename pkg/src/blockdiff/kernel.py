"""Dense tensors with reverse-mode differentiation on top of NumPy.

Deliberately small: float32/float64 only, dense arrays, and exactly the
operations a compact transformer needs. Differentiable ops record a backward
closure on the output tensor; ``Tensor.backward()`` replays them in reverse
topological order. When no input requires a gradient the closure is skipped
entirely, so inference paths pay no graph overhead.

All operations are pure functions of their inputs and deterministic: the same
arrays in give bit-identical arrays out on one build.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Precision",
    "FLOAT32",
    "FLOAT64",
    "Tensor",
    "matmul",
    "masked_softmax",
    "layer_norm",
    "rope_rotate",
    "cross_entropy",
    "embedding",
    "gelu",
    "dropout",
    "concat",
    "broadcast_to",
    "grad_check",
]

ROPE_BASE = 10000.0
LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Precision:
    """Floating-point width used for a computation context (32 or 64 bits).

    Sampling paths always run at 64 bits; training defaults to 32.
    """

    bits: int

    def __post_init__(self) -> None:
        if self.bits not in (32, 64):
            raise ValueError(f"precision must be 32 or 64 bits, got {self.bits}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.bits == 32 else np.float64)


FLOAT32 = Precision(32)
FLOAT64 = Precision(64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing NumPy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array plus an optional gradient tape node.

    ``data`` is always a NumPy float32 or float64 array; ``grad`` (same shape,
    same dtype) is populated by ``backward``. Tensors are treated as immutable
    after construction; training code replaces ``data`` wholesale between
    forward passes rather than mutating it mid-graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- graph construction ----------------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor through its recorded graph."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- arithmetic --------------------------------------------------------------
    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ValueError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other.data
        return np.asarray(other, dtype=self.dtype)

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            data = a.data + self._coerce(other)

            def bwd(g: np.ndarray) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.shape))

            return Tensor._from_op(data, (a, b), bwd)
        const = self._coerce(other)
        a = self
        data = a.data + const

        def bwd_const(g: np.ndarray) -> None:
            a._accumulate(_unbroadcast(g, a.shape))

        return Tensor._from_op(data, (a,), bwd_const)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g: np.ndarray) -> None:
            a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), bwd)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-np.asarray(other, dtype=self.dtype))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            data = a.data * self._coerce(other)

            def bwd(g: np.ndarray) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.shape))

            return Tensor._from_op(data, (a, b), bwd)
        const = self._coerce(other)
        a = self
        data = a.data * const

        def bwd_const(g: np.ndarray) -> None:
            a._accumulate(_unbroadcast(g * const, a.shape))

        return Tensor._from_op(data, (a,), bwd_const)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape
        data = a.data.reshape(shape)

        def bwd(g: np.ndarray) -> None:
            a._accumulate(g.reshape(old_shape))

        return Tensor._from_op(data, (a,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))
        data = a.data.transpose(axes)

        def bwd(g: np.ndarray) -> None:
            a._accumulate(g.transpose(inverse))

        return Tensor._from_op(data, (a,), bwd)

    def __getitem__(self, idx):
        a = self
        data = a.data[idx]
        if np.isscalar(data) or data.ndim == 0:
            data = np.asarray(data, dtype=a.dtype)
        else:
            data = data.copy()

        def bwd(g: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._from_op(data, (a,), bwd)

    # -- reductions -----------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g: np.ndarray) -> None:
            expanded = g
            if axis is not None and not keepdims:
                expanded = np.expand_dims(g, axis=axis)
            a._accumulate(np.broadcast_to(expanded, a.shape).copy())

        return Tensor._from_op(np.asarray(data, dtype=a.dtype), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise ----------------------------------------------------------------
    def exp(self):
        a = self
        data = np.exp(a.data)

        def bwd(g: np.ndarray) -> None:
            a._accumulate(g * data)

        return Tensor._from_op(data, (a,), bwd)

    def log(self):
        a = self
        data = np.log(a.data)

        def bwd(g: np.ndarray) -> None:
            a._accumulate(g / a.data)

        return Tensor._from_op(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batching over leading axes, as ``numpy.matmul``.

    The inner dimensions must agree; mismatch raises ``ValueError``.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two Tensors")
    if a.dtype != b.dtype:
        raise ValueError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(data, (a, b), bwd)


def _allowed_array(mask, shape: tuple[int, ...]) -> np.ndarray:
    allowed = getattr(mask, "allowed", mask)
    allowed = np.asarray(allowed, dtype=bool)
    return np.broadcast_to(allowed, shape)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax over the allowed columns of ``mask``.

    ``mask`` is a boolean grid (or any object with a boolean ``allowed``
    attribute) broadcastable to ``scores``. Forbidden columns get exactly zero
    weight. A row with no allowed column yields an all-zero row rather than an
    error: that is the convention for attention over an empty context, where
    the residual path must carry the stream value through unchanged.
    """
    allowed = _allowed_array(mask, scores.shape)
    a = scores
    if scores.shape[-1] == 0:
        data = np.zeros_like(scores.data)

        def bwd_empty(g: np.ndarray) -> None:
            a._accumulate(np.zeros_like(a.data))

        return Tensor._from_op(data, (a,), bwd_empty)

    neg = np.where(allowed, a.data, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expd = np.exp(neg - safe_max)
    denom = expd.sum(axis=-1, keepdims=True)
    data = expd / np.maximum(denom, np.finfo(a.dtype).tiny)

    def bwd(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate(data * (g - inner))

    return Tensor._from_op(data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine.

    Variance is floored by ``eps`` so constant rows map to zero instead of
    dividing by zero.
    """
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError("gain/bias width must match the normalized axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gx_hat - m1 - xhat * m2))

    return Tensor._from_op(data, (x, gain, bias), bwd)


def _rope_angles(positions: np.ndarray, width: int, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
    half = width // 2
    exponents = -2.0 * np.arange(half, dtype=np.float64) / width
    theta = ROPE_BASE ** exponents
    angles = positions[..., None].astype(np.float64) * theta
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_rotate(x: Tensor, positions) -> Tensor:
    """Rotate interleaved channel pairs by position-dependent angles.

    Pair ``i`` of the last axis turns by ``position * base**(-2i/d)`` with
    base 10000. ``positions`` are the original sequence positions of each row
    and must broadcast to ``x.shape[:-1]``; they are pinned to the tokens, not
    to the processed order. Rotations are isometries, so every pair keeps its
    Euclidean norm.
    """
    width = x.shape[-1]
    if width % 2 != 0:
        raise ValueError(f"rope_rotate needs an even channel count, got {width}")
    pos = np.asarray(positions)
    cos, sin = _rope_angles(pos, width, x.dtype)
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = even * cos - odd * sin
    data[..., 1::2] = even * sin + odd * cos
    a = x

    def bwd(g: np.ndarray) -> None:
        ge = g[..., 0::2]
        go = g[..., 1::2]
        out = np.empty_like(g)
        out[..., 0::2] = ge * cos + go * sin
        out[..., 1::2] = -ge * sin + go * cos
        a._accumulate(out)

    return Tensor._from_op(data, (a,), bwd)


def cross_entropy(logits: Tensor, targets, weights: Tensor | np.ndarray | None = None) -> Tensor:
    """Weighted negative log-likelihood of ``targets`` under row softmaxes.

    ``logits`` has shape ``[..., V]``; ``targets`` holds class indices shaped
    like the leading axes; ``weights`` (same leading shape, default all-ones)
    scales each row's loss. Returns a differentiable scalar.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {tgt.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target out of range [0, {vocab})")
    if weights is None:
        w = np.ones(tgt.shape, dtype=logits.dtype)
        w_tensor = None
    elif isinstance(weights, Tensor):
        w = weights.data
        w_tensor = weights
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        w_tensor = None
    if w.shape != tgt.shape:
        raise ValueError(f"weights shape {w.shape} does not match targets {tgt.shape}")

    flat = logits.data.reshape(-1, vocab)
    flat_t = tgt.reshape(-1)
    row_max = flat.max(axis=-1, keepdims=True)
    shifted = flat - row_max
    lse = np.log(np.exp(shifted).sum(axis=-1)) + row_max[:, 0]
    picked = flat[np.arange(flat.shape[0]), flat_t]
    nll = (lse - picked).reshape(tgt.shape)
    data = np.asarray((nll * w).sum(), dtype=logits.dtype)
    a = logits

    def bwd(g: np.ndarray) -> None:
        scale = float(g)
        if a.requires_grad:
            soft = np.exp(flat - row_max)
            soft /= soft.sum(axis=-1, keepdims=True)
            soft[np.arange(flat.shape[0]), flat_t] -= 1.0
            grad = soft.reshape(logits.shape) * (w[..., None] * scale)
            a._accumulate(grad.astype(a.dtype, copy=False))
        if w_tensor is not None and w_tensor.requires_grad:
            w_tensor._accumulate((nll * scale).astype(w_tensor.dtype, copy=False))

    parents = (a,) if w_tensor is None else (a, w_tensor)
    return Tensor._from_op(data, parents, bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")
    data = table.data[idx]
    a = table

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._from_op(data, (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = x
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def bwd(g: np.ndarray) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (cdf + a.data * pdf))

    return Tensor._from_op(data.astype(x.dtype, copy=False), (a,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * (keep * (1.0 / (1.0 - rate)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradients split back to each operand."""
    ts = list(tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    dtype = ts[0].dtype
    if any(t.dtype != dtype for t in ts):
        raise ValueError("concat operands must share a dtype")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g: np.ndarray) -> None:
        start = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, start + size)
                t._accumulate(g[tuple(index)])
            start += size

    return Tensor._from_op(data, ts, bwd)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = x
    data = np.broadcast_to(a.data, shape).copy()

    def bwd(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))

    return Tensor._from_op(data, (a,), bwd)


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Iterable[Tensor],
               step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Returns the largest relative error over every component of every input.
    Inputs must be float64 for the finite differences to resolve anything.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    out = f(*tensors)
    if out.size != 1:
        raise ValueError("grad_check expects a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(*tensors).data)
            flat[i] = orig - step
            lo = float(f(*tensors).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            ref = ana.reshape(-1)[i]
            denom = max(abs(ref), abs(numeric), 1e-6)
            worst = max(worst, abs(ref - numeric) / denom)
    for t in tensors:
        t.grad = None
    return worst
