"""Input validation helpers shared by the public constructors and estimators."""

from __future__ import annotations

import numpy as np

PROB_ATOL = 1e-9
VISITATION_ATOL = 1e-8


def as_float_array(x, name: str, ndim: int | tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if ndim is not None:
        allowed = (ndim,) if isinstance(ndim, int) else ndim
        if arr.ndim not in allowed:
            raise ValueError(f"{name} must have ndim in {allowed}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Return a read-only copy so containers stay immutable after construction."""
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def check_distribution(p, name: str, axis: int | None = None, atol: float = PROB_ATOL) -> np.ndarray:
    """Check nonnegativity and unit mass (over ``axis``, or the whole array)."""
    arr = as_float_array(p, name)
    if np.any(arr < -atol):
        raise ValueError(f"{name} has negative entries (min {arr.min():.3g})")
    sums = arr.sum() if axis is None else arr.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
        worst = float(np.max(np.abs(np.asarray(sums) - 1.0)))
        raise ValueError(f"{name} must sum to 1 (max deviation {worst:.3g})")
    return np.clip(arr, 0.0, None)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
