"""Dense float64 kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects.  The helpers here add the
shape validation the rest of the package relies on and reject extent-0
arrays up front so reductions never see an empty axis.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Copy ``data`` into a contiguous float64 array, rejecting extent-0 axes."""
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    if any(n == 0 for n in arr.shape):
        raise DimensionError(f"extent-0 tensors are not allowed, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise DimensionError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


_REDUCERS = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(x: np.ndarray, kind: str = "sum", axis: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if kind not in _REDUCERS:
        raise ValueError(f"unknown reduction {kind!r}; expected one of {sorted(_REDUCERS)}")
    if any(n == 0 for n in x.shape):
        raise DimensionError(f"cannot reduce extent-0 tensor of shape {x.shape}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    return np.asarray(_REDUCERS[kind](x, axis=axis))
