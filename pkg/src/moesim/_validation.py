"""Input validation helpers shared by the estimators and simulators."""

from __future__ import annotations

from fractions import Fraction
from numbers import Rational

import numpy as np
from sklearn.utils import check_array

COLUMN_SUM_TOL = 1e-9


def as_fraction(x) -> Fraction:
    """Exact rational for a user-supplied number.

    Floats go through their shortest repr so that ``0.05`` becomes ``1/20``
    rather than the binary approximation.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, Rational):
        return Fraction(x.numerator, x.denominator)
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            raise ValueError(f"expected a finite number, got {x!r}")
        return Fraction(repr(float(x)))
    if isinstance(x, str):
        return Fraction(x)
    raise TypeError(f"expected a number, got {type(x).__name__}")


def check_positive_int(value, name: str, *, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive(value, name: str, *, allow_zero: bool = False) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value


def check_divisible(num_experts: int, num_devices: int) -> int:
    """Return experts per device; raise unless devices divide experts evenly."""
    check_positive_int(num_experts, "num_experts")
    check_positive_int(num_devices, "num_devices")
    if num_experts % num_devices:
        raise ValueError(
            f"num_experts ({num_experts}) must be divisible by num_devices ({num_devices})"
        )
    return num_experts // num_devices


def check_load_array(X, *, min_batches: int = 1) -> np.ndarray:
    """Validate an E x B load matrix given as a LoadMatrix or array-like."""
    A = getattr(X, "A", X)
    A = check_array(A, dtype=np.float64, ensure_min_samples=1, ensure_min_features=min_batches)
    if np.any(A < 0) or np.any(A > 1 + COLUMN_SUM_TOL):
        raise ValueError("load fractions must lie in [0, 1]")
    sums = A.sum(axis=0)
    bad = np.flatnonzero(np.abs(sums - 1.0) > COLUMN_SUM_TOL)
    if bad.size:
        raise ValueError(f"load column {int(bad[0])} sums to {sums[bad[0]]!r}, expected 1")
    return A
