"""Univariate B-spline bases, difference penalties and nested bases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# relative slack when checking that evaluation points lie inside the domain
_DOMAIN_SLACK = 1e-10


@dataclass(frozen=True)
class KnotVector:
    """Equally spaced knot sequence for a B-spline basis of a given degree.

    ``knots`` contains ``interior_segments + 1`` breakpoints spanning
    ``[lower, upper]`` plus ``degree`` extra knots at the same spacing
    beyond each end.
    """

    degree: int
    interior_segments: int
    knots: np.ndarray
    lower: float
    upper: float

    @property
    def dim(self) -> int:
        """Number of basis functions."""
        return self.interior_segments + self.degree

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / self.interior_segments

    def greville(self) -> np.ndarray:
        """Greville abscissae (knot averages), one per basis function.

        A coefficient vector equal to ``a + b * greville()`` reproduces the
        linear function ``a + b * x`` exactly on the domain.
        """
        d = self.degree
        if d == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        windows = np.lib.stride_tricks.sliding_window_view(self.knots[1:-1], d)
        return windows.mean(axis=1)


@dataclass(frozen=True)
class BasisMatrix:
    """Dense B-spline basis evaluated at a set of points."""

    values: np.ndarray
    degree: int
    lower: float
    upper: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class DifferenceOperator:
    order: int
    matrix: np.ndarray

    @property
    def penalty(self) -> np.ndarray:
        """The penalty matrix ``D' D``."""
        return self.matrix.T @ self.matrix


def make_knots(lower: float, upper: float, nseg: int, degree: int) -> KnotVector:
    """Equally spaced knots over ``[lower, upper]`` with ``nseg`` segments."""
    lower = float(lower)
    upper = float(upper)
    if not (np.isfinite(lower) and np.isfinite(upper)):
        raise ValueError("knot bounds must be finite")
    if upper <= lower:
        raise ValueError(f"upper bound {upper} must exceed lower bound {lower}")
    if int(nseg) != nseg or nseg < 1:
        raise ValueError(f"number of segments must be a positive integer, got {nseg}")
    if int(degree) != degree or degree < 0:
        raise ValueError(f"degree must be a non-negative integer, got {degree}")
    nseg = int(nseg)
    degree = int(degree)
    dx = (upper - lower) / nseg
    knots = lower + dx * np.arange(-degree, nseg + degree + 1, dtype=float)
    # pin the breakpoints that coincide with the domain ends
    knots[degree] = lower
    knots[degree + nseg] = upper
    return KnotVector(degree, nseg, knots, lower, upper)


def eval_basis(kv: KnotVector, points) -> BasisMatrix:
    """Evaluate all B-splines of ``kv`` at ``points`` (Cox-de Boor recursion).

    Points equal to the upper bound belong to the last segment, so every row
    sums to one on the closed domain.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float)).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation points must be finite")
    slack = _DOMAIN_SLACK * (kv.upper - kv.lower)
    outside = (x < kv.lower - slack) | (x > kv.upper + slack)
    if np.any(outside):
        bad = x[outside][0]
        raise ValueError(f"point {bad} lies outside the basis domain [{kv.lower}, {kv.upper}]")
    x = np.clip(x, kv.lower, kv.upper)

    p = kv.degree
    t = kv.knots
    n = x.size
    # knot interval index i with t[i] <= x < t[i+1], restricted to the domain
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, p, p + kv.interior_segments - 1)

    vals = np.zeros((n, p + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved

    out = np.zeros((n, kv.dim))
    cols = (span - p)[:, None] + np.arange(p + 1)[None, :]
    out[np.arange(n)[:, None], cols] = vals
    return BasisMatrix(out, p, kv.lower, kv.upper)


def difference_matrix(dim: int, order: int) -> DifferenceOperator:
    """Difference operator of the given order acting on ``dim`` coefficients."""
    if order < 1:
        raise ValueError("difference order must be positive")
    if dim <= order:
        raise ValueError(f"dimension {dim} must exceed the difference order {order}")
    d = np.eye(dim, dtype=np.int64)
    for _ in range(order):
        d = d[1:] - d[:-1]
    return DifferenceOperator(order, d)


def nested_knots(kv_full: KnotVector, divisor: int) -> KnotVector:
    """Knots of the reduced basis whose segment count is ``nseg / divisor``."""
    if int(divisor) != divisor or divisor < 1:
        raise ValueError(f"nesting divisor must be a positive integer, got {divisor}")
    if kv_full.interior_segments % divisor:
        raise ValueError(
            f"nesting divisor {divisor} does not divide the number of segments "
            f"{kv_full.interior_segments}"
        )
    if divisor == 1:
        return kv_full
    return make_knots(kv_full.lower, kv_full.upper,
                      kv_full.interior_segments // divisor, kv_full.degree)


def nested_basis(kv_full: KnotVector, divisor: int, points) -> BasisMatrix:
    """Reduced basis on the same domain whose span lies inside the full one."""
    return eval_basis(nested_knots(kv_full, divisor), points)
