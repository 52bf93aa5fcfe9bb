"""Dense tensor substrate with explicit reverse-mode backward passes.

A :class:`Tensor` is a C-contiguous float array plus an optional gradient
buffer of the same shape. Forward operations are pure; each has a paired
``*_backward`` function that accumulates into the operands' ``grad``
buffers. Callers zero gradients between steps.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, PrecisionError, ShapeError
from .rng import as_rng

DTYPES = {"single": np.float32, "double": np.float64}


def dtype_of(precision: str) -> np.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ParameterError(f"unknown precision {precision!r}") from None


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.ensure_grad()
        self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def _check_shape(shape: Sequence[int]) -> tuple:
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"dimensions must be >= 1, got {dims}")
    return dims


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype))


def full(shape, value, dtype=np.float64) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def uniform(shape, lo, hi, seed, dtype=np.float64) -> Tensor:
    rng = as_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=_check_shape(shape)).astype(dtype))


def normal(shape, mu, sigma, seed, dtype=np.float64) -> Tensor:
    rng = as_rng(seed)
    return Tensor(rng.normal(mu, sigma, size=_check_shape(shape)).astype(dtype))


# ---------------------------------------------------------------------------
# elementwise add / sub / mul, with b broadcastable over a's trailing dims


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {b.shape} over {a.shape}") from None
    if out_shape != a.shape:
        raise ShapeError(f"{b.shape} does not broadcast over {a.shape}")


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the dimensions numpy broadcast when expanding to g.shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op not in _ELEMENTWISE:
        raise ParameterError(f"unknown elementwise op {op!r}")
    _check_broadcast(a, b)
    return Tensor(_ELEMENTWISE[op](a.data, b.data))


def elementwise_backward(a: Tensor, b: Tensor, op: str, upstream: np.ndarray) -> None:
    upstream = np.asarray(upstream)
    if op == "add":
        ga, gb = upstream, upstream
    elif op == "sub":
        ga, gb = upstream, -upstream
    elif op == "mul":
        ga, gb = upstream * b.data, upstream * a.data
    else:
        raise ParameterError(f"unknown elementwise op {op!r}")
    a.accumulate_grad(_reduce_to_shape(ga, a.shape))
    b.accumulate_grad(_reduce_to_shape(gb, b.shape))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    return Tensor(a.data @ b.data)


def matmul_backward(a: Tensor, b: Tensor, upstream: np.ndarray) -> None:
    upstream = np.asarray(upstream)
    a.accumulate_grad(upstream @ b.data.T)
    b.accumulate_grad(a.data.T @ upstream)


# ---------------------------------------------------------------------------
# softmax


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return Tensor(e / e.sum(axis=axis, keepdims=True))


def softmax_backward(x: Tensor, out: Tensor, axis: int, upstream: np.ndarray) -> None:
    x.accumulate_grad(softmax_vjp(out.data, np.asarray(upstream), axis))


def softmax_vjp(out: np.ndarray, upstream: np.ndarray, axis: int) -> np.ndarray:
    inner = (upstream * out).sum(axis=axis, keepdims=True)
    return (upstream - inner) * out


# ---------------------------------------------------------------------------
# reshape / transpose


def reshape(x: Tensor, shape) -> Tensor:
    shape = _check_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return Tensor(x.data.reshape(shape))


def reshape_backward(x: Tensor, upstream: np.ndarray) -> None:
    x.accumulate_grad(np.asarray(upstream).reshape(x.shape))


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.data.ndim)):
        raise ShapeError(f"invalid permutation {perm} for rank {x.data.ndim}")
    return Tensor(x.data.transpose(perm))


def transpose_backward(x: Tensor, perm, upstream: np.ndarray) -> None:
    perm = tuple(int(p) for p in perm)
    inverse = np.argsort(perm)
    x.accumulate_grad(np.asarray(upstream).transpose(inverse))


# ---------------------------------------------------------------------------
# finite-difference gradient check

# An operation handed to gradcheck is a callable f(x) -> (out, vjp) where
# vjp maps an upstream array to the gradient of sum(upstream * out) w.r.t. x.
GradcheckOp = Callable[[Tensor], tuple]


def gradcheck(f: GradcheckOp, x: Tensor, epsilon: float = 1e-5, rng=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Only meaningful in double precision; the relative error at element i is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if x.dtype != np.float64:
        raise PrecisionError("gradient checking requires double precision")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = as_rng(rng)

    out, vjp = f(x)
    upstream = rng.standard_normal(out.shape)
    analytic = np.asarray(vjp(upstream), dtype=np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = float((f(x)[0].data * upstream).sum())
        flat[i] = orig - epsilon
        minus = float((f(x)[0].data * upstream).sum())
        flat[i] = orig
        numeric[i] = (plus - minus) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
