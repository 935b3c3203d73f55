"""Dense array primitives used by every other module.

Tensors are plain ``numpy.ndarray`` values in a fixed canonical layout:
volumes and activations are indexed ``(B, D, H, W, C)`` with the channel
axis last (fastest-varying in memory), so concatenation along channels is
a contiguous copy.  Training arithmetic runs in float32; gradient checking
switches to float64.

No broadcasting beyond scalars: shape mismatches are errors, not implicit
expansion.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisError, NonFiniteError, ShapeError

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "max")
REDUCE_KINDS = ("sum", "mean", "max")


def require_shape(a: np.ndarray, expected: Sequence[int], what: str = "tensor") -> None:
    if tuple(a.shape) != tuple(expected):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {tuple(a.shape)}")


def check_finite(a: np.ndarray, context: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{context} contains NaN or Inf")
    return a


def elementwise(kind: str, a: np.ndarray, b) -> np.ndarray:
    """Entrywise arithmetic between two equal-shaped arrays (or array and scalar)."""
    if kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    a = np.asarray(a)
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        pass
    else:
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"elementwise {kind}: shapes {a.shape} and {b.shape} differ")
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "max":
        return np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b
    return check_finite(out, "elementwise div")


def reduce(kind: str, a: np.ndarray, axes: Iterable[int] | int | None = None,
           keepdims: bool = False) -> np.ndarray:
    """Sum / mean / max over the given axes (all axes when ``axes`` is None)."""
    if kind not in REDUCE_KINDS:
        raise ValueError(f"unknown reduce kind {kind!r}")
    a = np.asarray(a)
    if axes is None:
        ax = tuple(range(a.ndim))
    elif isinstance(axes, int):
        ax = (axes,)
    else:
        ax = tuple(axes)
    for x in ax:
        if not -a.ndim <= x < a.ndim:
            raise AxisError(f"axis {x} invalid for shape {a.shape}")
    if len(set(x % a.ndim for x in ax)) != len(ax):
        raise AxisError(f"duplicate axis in {ax}")
    if kind == "sum":
        return np.sum(a, axis=ax, keepdims=keepdims)
    if kind == "mean":
        return np.mean(a, axis=ax, keepdims=keepdims)
    return np.max(a, axis=ax, keepdims=keepdims)


def _axis_coords(src: int, dst: int) -> np.ndarray:
    # Corner-aligned sampling; a single output sample falls at the axis center.
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.linspace(0.0, src - 1, dst)


def _interp_axis(v: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    i0 = np.floor(coords).astype(np.intp)
    i0 = np.clip(i0, 0, v.shape[axis] - 1)
    i1 = np.clip(i0 + 1, 0, v.shape[axis] - 1)
    frac = (coords - i0).astype(v.dtype)
    shape = [1] * v.ndim
    shape[axis] = len(coords)
    frac = frac.reshape(shape)
    lo = np.take(v, i0, axis=axis)
    hi = np.take(v, i1, axis=axis)
    return lo * (1 - frac) + hi * frac


def resample_trilinear(v: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Resize a (D, H, W) volume to ``target`` extents by trilinear interpolation.

    Corner-aligned: output corners sample input corners, so resampling to the
    same shape is the identity and constants are preserved exactly.
    """
    v = np.asarray(v)
    if v.ndim != 3:
        raise ShapeError(f"resample_trilinear expects a (D, H, W) volume, got shape {v.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 for t in target):
        raise ShapeError(f"invalid target shape {target}")
    out = v
    for axis in range(3):
        if target[axis] != out.shape[axis]:
            out = _interp_axis(out, axis, _axis_coords(v.shape[axis], target[axis]))
        # Exact identity along unchanged axes: skip the interpolation entirely.
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    Runs in float64 regardless of the input dtype; ``f`` must be pure and
    deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: f returned a non-finite value at entry {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case relative disagreement between two gradient estimates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"max_rel_err: shapes {a.shape} and {n.shape} differ")
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
