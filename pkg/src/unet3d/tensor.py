"""Dense 5-D tensors in (n, c, d, h, w) layout.

A :class:`Tensor` is a read-only wrapper around a C-contiguous numpy array
of single or double precision. Everything else in the package passes these
around; the heavy kernels in :mod:`unet3d.layers` unwrap them.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_INDEX_MAX = np.iinfo(np.intp).max


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable 5-D array of float32 or float64 scalars."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 5:
            raise ShapeError(f"expected 5 axes (n, c, d, h, w), got shape {arr.shape}")
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr).view()
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.data.shape[2:]

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has {self.size}")
        return float(self.data.reshape(-1)[0])

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.dtype == other.dtype and self.shape == other.shape
                and bool(np.array_equal(self.data, other.data)))

    __hash__ = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"shape must have 5 extents, got {shape}")
    if min(shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    count = 1
    for s in shape:
        count *= s
        if count > _INDEX_MAX:
            raise OverflowError(f"element count of {shape} overflows the index type")
    return shape


def new_filled(shape: Sequence[int], value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return Tensor(fn(a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def fold_sum(arr: np.ndarray, axes: Iterable[int] | None = None) -> np.ndarray:
    """Sum ``arr`` over ``axes`` as a sequential left fold.

    Elements are added one at a time in ascending linear-index order, so the
    result is bitwise reproducible and independent of numpy's pairwise
    blocking. Reduced axes are kept with extent 1.
    """
    arr = np.asarray(arr)
    axes = tuple(range(arr.ndim)) if axes is None else tuple(sorted({a % arr.ndim for a in axes}))
    kept = [a for a in range(arr.ndim) if a not in axes]
    moved = np.transpose(arr, kept + list(axes))
    outer = [arr.shape[a] for a in kept]
    flat = moved.reshape(int(np.prod(outer, dtype=np.int64)), -1)
    # accumulate is a strict left-to-right recurrence
    total = np.add.accumulate(flat, axis=1, dtype=arr.dtype)[:, -1]
    out_shape = [1 if a in axes else arr.shape[a] for a in range(arr.ndim)]
    return total.reshape(out_shape)


def reduce_sum(a: Tensor, over: Iterable[int] | None = None) -> Tensor:
    """Sum over the given axes (all axes when ``over`` is None)."""
    if over is not None:
        over = list(over)
        for ax in over:
            if not -5 <= ax < 5:
                raise ShapeError(f"invalid axis {ax}")
    return Tensor(fold_sum(a.data, over))


def pad_zero(a: Tensor, pad: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad the three spatial axes; ``pad`` is ((zb, za), (yb, ya), (xb, xa))."""
    pad = [tuple(int(v) for v in p) for p in pad]
    if len(pad) != 3 or any(len(p) != 2 or min(p) < 0 for p in pad):
        raise ValueError(f"pad must be three non-negative (before, after) pairs, got {pad}")
    return Tensor(np.pad(a.data, [(0, 0), (0, 0), *pad]))


def crop(a: Tensor, origin: Sequence[int], size: Sequence[int]) -> Tensor:
    origin = [int(o) for o in origin]
    size = [int(s) for s in size]
    for o, s, e in zip(origin, size, a.spatial):
        if o < 0 or s < 1 or o + s > e:
            raise IndexError(f"crop origin {origin} size {size} outside extents {a.spatial}")
    (z, y, x), (d, h, w) = origin, size
    return Tensor(a.data[:, :, z:z + d, y:y + h, x:x + w].copy())


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.spatial != b.spatial:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    return Tensor(np.concatenate([a.data, b.data], axis=1))
