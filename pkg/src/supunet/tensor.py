"""Rank-4 float64 arrays in (n, c, h, w) row-major layout.

Tensors are plain C-contiguous ``numpy.ndarray`` objects; this module only
adds the shape checks and the few whole-tensor primitives the rest of the
package relies on.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

Shape4 = Tuple[int, int, int, int]

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class ShapeError(ValueError):
    """Raised when tensor dimensions violate an operation's contract."""


def check_shape(shape) -> Shape4:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions, got {len(shape)}: {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    n, c, h, w = shape
    if n * c * h * w >= np.iinfo(np.intp).max:
        raise ShapeError(f"element count of {shape} overflows the index type")
    return shape


def as_tensor(a) -> np.ndarray:
    """Validate ``a`` as a rank-4 tensor and return it as contiguous float64."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    check_shape(arr.shape)
    return arr


def create(shape, fill: float = 0.0) -> np.ndarray:
    return np.full(check_shape(shape), float(fill), dtype=np.float64)


def offset(shape, i: int, j: int, y: int, x: int) -> int:
    """Flat row-major offset of element (i, j, y, x)."""
    _, c, h, w = shape
    return ((i * c + j) * h + y) * w + x


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(as_tensor(a), as_tensor(b))


def reduce_sum(a: np.ndarray) -> float:
    """Sum of all elements, accumulated strictly left to right in flat order.

    ``np.sum`` uses pairwise summation; ``add.accumulate`` is sequential, so
    the result is reproducible in any language that loops the same way.
    """
    flat = np.ascontiguousarray(a, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])
