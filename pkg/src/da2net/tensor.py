"""Dense float tensors, the counter-based RNG, and the finite-difference oracle.

Activation tensors follow the (batch N, channels C, height H, width W) layout;
flat index of ``[n, c, h, w]`` is ``((n*C + c)*H + h)*W + w`` (row-major).
All operations here are pure: inputs are never mutated and equal inputs give
bit-equal outputs.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Callable

import numpy as np

from .errors import OracleError, ShapeError

__all__ = [
    "Tensor",
    "Rng",
    "tensor_create",
    "elementwise_scale_broadcast",
    "finite_difference_gradient",
]

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
    np.dtype(np.float32): np.float32,
    np.dtype(np.float64): np.float64,
}


def _resolve_dtype(dtype) -> type:
    try:
        return _DTYPES[dtype]
    except (KeyError, TypeError):
        raise ShapeError(f"unsupported dtype {dtype!r}; expected f32 or f64") from None


class Tensor:
    """Immutable dense N-dimensional array of f32 or f64 values.

    The backing array is contiguous, row-major, and marked read-only, so a
    Tensor can be shared freely (across threads included) once constructed.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, dtype=None):
        arr = np.ascontiguousarray(data, dtype=_resolve_dtype(dtype) if dtype else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(self.data.reshape(shape))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


class Rng:
    """Splittable counter-based random generator (Philox keyed by seed+stream).

    Identical (seed, stream, call sequence) reproduces identical values
    bit-for-bit on one platform, and distinct streams are independent, so
    per-sample streams make data pipelines order-independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream: int) -> "Rng":
        """Fresh generator on a different stream of the same seed."""
        return Rng(self.seed, stream)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype="f32") -> np.ndarray:
        out = self._gen.normal(mean, std, size=tuple(shape))
        return out.astype(_resolve_dtype(dtype))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype="f32") -> np.ndarray:
        out = self._gen.uniform(low, high, size=tuple(shape))
        return out.astype(_resolve_dtype(dtype))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def tensor_create(shape: Sequence[int], fill=0.0, *, rng: Rng | None = None,
                  mean: float = 0.0, std: float = 1.0, dtype="f32") -> Tensor:
    """Build a tensor of `shape` filled with a constant, explicit values, or
    normal draws (``fill="normal"`` with an `rng`).
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must be non-empty")
    if min(shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    np_dtype = _resolve_dtype(dtype)
    n = int(np.prod(shape))

    if isinstance(fill, str):
        if fill != "normal":
            raise ShapeError(f"unknown fill mode {fill!r}")
        if rng is None:
            raise ShapeError("fill='normal' requires an rng")
        return Tensor(rng.normal(shape, mean, std, dtype=np_dtype))
    if isinstance(fill, (int, float, np.floating, np.integer)):
        return Tensor(np.full(shape, float(fill), dtype=np_dtype))

    values = np.asarray(fill, dtype=np_dtype).reshape(-1)
    if values.size != n:
        raise ShapeError(f"expected {n} values, got {values.size}")
    return Tensor(values.reshape(shape))


def elementwise_scale_broadcast(x: Tensor, w: Tensor, tape=None) -> Tensor:
    """Scale every spatial plane of `x` (NCHW) by a per-channel weight.

    `w` has shape (N, C, 1, 1) or (1, C, 1, 1); the output keeps x's shape.
    With weights in (0, 1) the result never amplifies: |out| <= |x|.
    """
    if x.ndim != 4:
        raise ShapeError(f"x must be NCHW, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"w must have shape (N,C,1,1) or (1,C,1,1), got {w.shape}")
    if w.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"w batch extent {w.shape[0]} does not broadcast to {x.shape[0]}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"channel mismatch: x has {x.shape[1]} channels, w has {w.shape[1]}")

    out = Tensor(x.data * w.data)
    if tape is not None:
        xd, wd = x.data, w.data

        def vjp(g):
            gx = g * wd
            gw = (g * xd).sum(axis=(2, 3), keepdims=True)
            if wd.shape[0] == 1:
                gw = gw.sum(axis=0, keepdims=True)
            return gx, gw

        tape.record("elementwise_scale_broadcast", (x, w), out, vjp)
    return out


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor,
                               eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    `f` must be pure and deterministic; `x` must be f64 (f32 steps are too
    noisy for the tolerances this oracle backs).
    """
    if x.dtype != np.float64:
        raise ShapeError(f"finite differences require an f64 tensor, got {x.dtype.name}")
    if not eps > 0:
        raise ShapeError(f"eps must be positive, got {eps}")

    flat = x.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * eps
            val = float(f(Tensor(bumped.reshape(x.shape))))
            if not np.isfinite(val):
                idx = tuple(int(v) for v in np.unravel_index(i, x.shape))
                raise OracleError(f"f returned non-finite value at index {idx}")
            if sign > 0:
                fp = val
            else:
                fm = val
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))
