"""Dense real arrays with shape bookkeeping and an optional gradient buffer.

Layout is row-major (C order) with the last axis fastest. Feature maps use
``[batch, depth, y, x]``; the x extent is 1 everywhere in this package.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .rng import SplitMix64

Number = Union[int, float]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {shape!r}: every extent must be >= 1")
    return dims


class Tensor:
    """A value array plus an optional same-shaped gradient."""

    __slots__ = ("values", "grad")

    def __init__(self, values: np.ndarray, grad: np.ndarray | None = None):
        values = np.ascontiguousarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        check_shape(values.shape)
        if grad is not None and grad.shape != values.shape:
            raise ShapeError(f"grad shape {grad.shape} != values shape {values.shape}")
        self.values = values
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.values.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), None if self.grad is None else self.grad.copy())

    def check_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError(f"non-finite values in {what}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(check_shape(shape), dtype=dtype))


def full(shape: Sequence[int], value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(check_shape(shape), value, dtype=dtype))


def uniform(shape: Sequence[int], lo: float, hi: float, seed: int, dtype=np.float32) -> Tensor:
    dims = check_shape(shape)
    vals = SplitMix64(seed).uniform(int(np.prod(dims)), lo, hi)
    return Tensor(vals.reshape(dims).astype(dtype))


def from_values(shape: Sequence[int], values, dtype=np.float32) -> Tensor:
    dims = check_shape(shape)
    arr = np.asarray(values, dtype=dtype).ravel()
    if arr.size != int(np.prod(dims)):
        raise ShapeError(f"{arr.size} values cannot fill shape {dims}")
    return Tensor(arr.reshape(dims))


def new(shape: Sequence[int], fill: str = "zeros", *, value: float = 0.0, lo: float = 0.0,
        hi: float = 1.0, seed: int = 0, values=None, dtype=np.float32) -> Tensor:
    """Create a tensor; ``fill`` is one of zeros, constant, uniform, values."""
    if fill == "zeros":
        return zeros(shape, dtype)
    if fill == "constant":
        return full(shape, value, dtype)
    if fill == "uniform":
        return uniform(shape, lo, hi, seed, dtype)
    if fill == "values":
        return from_values(shape, values, dtype)
    raise ValueError(f"unknown fill {fill!r}")


def _binary(a: Tensor, b: Tensor, fn) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return Tensor(fn(a.values, b.values))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply)


def scale(a: Tensor, s: Number) -> Tensor:
    return Tensor(a.values * a.values.dtype.type(s))


def elementwise(op: str, a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    if op == "scale":
        return scale(a, b)
    fns = {"add": add, "sub": sub, "mul": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    if not isinstance(b, Tensor):
        raise TypeError(f"{op} needs two tensors")
    return fns[op](a, b)


def reduce(op: str, a: Tensor) -> float:
    """Sum, mean or max-abs of every entry, accumulated in float64."""
    v = a.values.astype(np.float64, copy=False).ravel()
    if v.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    if op == "sum":
        return float(v.sum())
    if op == "mean":
        return float(v.mean())
    if op == "max-abs":
        return float(np.abs(v).max())
    raise ValueError(f"unknown reduction {op!r}")
