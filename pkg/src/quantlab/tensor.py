"""Dense float64 tensor container shared by every other module.

Values live in a flat row-major buffer. 4-D tensors use NCHW order; single
images are channel-first (C, H, W). Buffers are frozen after construction so
tensors can be shared freely across worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

Shape = tuple[int, ...]


def validate_shape(shape: Iterable[int]) -> Shape:
    """Normalize to a tuple of positive ints; reject empty or non-positive dims."""
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ValueError("shape needs at least one dimension")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    return dims


@dataclass(frozen=True)
class Tensor:
    """Immutable dense array: `shape` plus a flat row-major float64 buffer."""

    shape: Shape
    data: np.ndarray

    def __post_init__(self) -> None:
        dims = validate_shape(self.shape)
        buf = np.array(self.data, dtype=np.float64).reshape(-1)
        if buf.size != math.prod(dims):
            raise ValueError(f"buffer length {buf.size} does not match shape {dims}")
        if not np.all(np.isfinite(buf)):
            raise ValueError("tensor entries must be finite")
        buf.setflags(write=False)
        object.__setattr__(self, "shape", dims)
        object.__setattr__(self, "data", buf)

    @classmethod
    def from_array(cls, a: np.ndarray | Iterable) -> "Tensor":
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(tuple(arr.shape), arr.reshape(-1))

    def array(self) -> np.ndarray:
        """Read-only view shaped like `self.shape`."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return len(self.shape)


class TensorStats(NamedTuple):
    min: float
    max: float
    mean: float
    var: float


def zeros(shape: Iterable[int]) -> Tensor:
    dims = validate_shape(shape)
    return Tensor(dims, np.zeros(math.prod(dims)))


def elementwise_stats(t: Tensor) -> TensorStats:
    """Min, max, mean and population variance over all entries.

    Population (biased) variance is used everywhere in this package, matching
    how weight statistics are consumed downstream.
    """
    a = t.data
    return TensorStats(float(a.min()), float(a.max()), float(a.mean()), float(a.var()))
