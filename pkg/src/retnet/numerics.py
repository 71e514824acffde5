"""Dense tensor primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` values.  Every exported function checks
its result for NaN/Inf and raises :class:`NumericError` instead of handing a
non-finite value downstream.  Element precision follows the inputs; use
:func:`as_tensor` with ``precision=32`` or ``64`` to pick one explicitly.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

GELU_COEF = math.sqrt(2.0 / math.pi)
DEFAULT_EPS = 1e-6


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an operation would produce a non-finite value."""


def dtype_for(precision: int) -> np.dtype:
    if precision == 64:
        return np.dtype(np.float64)
    if precision == 32:
        return np.dtype(np.float32)
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def as_tensor(x, precision: int | None = None) -> np.ndarray:
    arr = np.asarray(x)
    if precision is not None:
        arr = arr.astype(dtype_for(precision), copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return _finite(arr, "as_tensor")


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    # a finite sum proves every entry finite; only an overflowing sum needs the full scan
    if not np.isfinite(np.add.reduce(x, axis=None)) and not np.isfinite(x).all():
        raise NumericError(f"{op} produced a non-finite value")
    return x


# -- multiply-accumulate accounting -------------------------------------------

_counter = threading.local()


@contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` in this thread.

    Yields a one-element list whose single entry is the running total.
    """
    prev = getattr(_counter, "box", None)
    box = [0]
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def _add_macs(n: int) -> None:
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += n


# -- arithmetic -----------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``.

    Leading (batch) axes broadcast as in ``numpy.matmul``; the contraction
    is over the last axis of ``a`` and the second-to-last axis of ``b``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the flattened batch is much faster than a batched call
        out = (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = np.matmul(a, b)
    _add_macs(out.size * a.shape[-1])
    return _finite(out, "matmul")


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    """One-sided broadcasting only: ``b`` may be stretched to ``a``, never the reverse."""
    if b.ndim > a.ndim:
        raise DimensionError(f"{op}: {b.shape} has more axes than {a.shape}")
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if db != da and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


def _operand(a: np.ndarray, b) -> np.ndarray:
    # scalars take the tensor's precision instead of promoting it to 64-bit
    return np.asarray(b, dtype=a.dtype) if np.ndim(b) == 0 else np.asarray(b)


def hadamard(a: np.ndarray, b) -> np.ndarray:
    """Elementwise product.

    ``b`` may be a scalar, a tensor of the same shape, a per-row factor
    (``[..., n, 1]``), a per-column factor (``[m]`` or ``[..., 1, m]``), or a
    matrix shared across the leading batch axes of ``a``.
    """
    b = _operand(a, b)
    _check_broadcast(a, b, "hadamard")
    return _finite(a * b, "hadamard")


def add(a: np.ndarray, b) -> np.ndarray:
    b = _operand(a, b)
    _check_broadcast(a, b, "add")
    return _finite(a + b, "add")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental pass and no overflow for large |x|
    r = np.asarray(np.multiply(x, 0.5))
    np.tanh(r, out=r)
    r += 1.0
    r *= 0.5
    return r


def swish(x: np.ndarray) -> np.ndarray:
    """SiLU, ``x * sigmoid(x)``."""
    return _finite(x * sigmoid(x), "swish")


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    t = np.asarray(x * x)
    t *= GELU_COEF * 0.044715
    t += GELU_COEF
    t *= x
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return _finite(t, "gelu")


def group_norm(
    x: np.ndarray,
    groups: int,
    eps: float = DEFAULT_EPS,
    scale: np.ndarray | None = None,
    shift: np.ndarray | None = None,
) -> np.ndarray:
    """Normalize each row's ``groups`` contiguous feature groups independently.

    Works on any leading shape; the last axis is the feature axis.
    """
    d = x.shape[-1]
    if groups < 1 or d % groups:
        raise DimensionError(f"{d} features cannot be split into {groups} groups")
    g = x.reshape(*x.shape[:-1], groups, d // groups)
    out = g - g.mean(axis=-1, keepdims=True)
    inv = (out * out).mean(axis=-1, keepdims=True)
    _finite(inv, "group_norm variance")
    inv += eps
    np.sqrt(inv, out=inv)
    out /= inv
    out = out.reshape(x.shape)
    if scale is not None:
        out = out * scale
    if shift is not None:
        out = out + shift
    return _finite(out, "group_norm")


def layer_norm(x, eps=DEFAULT_EPS, scale=None, shift=None) -> np.ndarray:
    return group_norm(x, 1, eps, scale, shift)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    ``-inf`` entries are allowed on input (masked positions) as long as
    every row keeps at least one finite entry.
    """
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return _finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")
