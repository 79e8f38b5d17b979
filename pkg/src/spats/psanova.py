"""Tensor-product P-spline design and its PS-ANOVA mixed-model form.

The spatial surface over (row, column) positions is written as a bilinear
polynomial ``[1, u, v, u*v]`` (fixed) plus five random blocks::

    f(col)         Z_v                  precision  E_v
    f(row)         Z_u                  precision  E_u
    f(col):row     u * Z_v              precision  E_v
    col:f(row)     v * Z_u              precision  E_u
    f(col):f(row)  Z_v^N (row-kron) Z_u^N   precision  E_v^N (+) E_u^N

where ``u`` is the scaled row coordinate, ``v`` the scaled column
coordinate, ``Z = B U`` projects a marginal B-spline basis onto the
eigenvectors of its second-order difference penalty with non-zero
eigenvalues ``E``, and the ``N`` superscript marks the (optionally) nested
margins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .splines import (
    KnotVector,
    DifferenceOperator,
    difference_matrix,
    eval_basis,
    make_knots,
    nested_knots,
)

BLOCK_NAMES = ("f(col)", "f(row)", "f(col):row", "col:f(row)", "f(col):f(row)")
BILINEAR_NAMES = ("Intercept", "row", "col", "row:col")
PENALTY_ORDER = 2


def row_kron(a, b) -> np.ndarray:
    """Row-wise Kronecker product: row i is ``kron(a[i], b[i])``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


@dataclass(frozen=True)
class EvdPenalty:
    """Non-null eigen-structure of ``D'D``."""

    vectors_nonzero: np.ndarray
    eigenvalues_nonzero: np.ndarray
    nullity: int


def evd_penalty(d: DifferenceOperator, tol: float = 1e-10) -> EvdPenalty:
    """Eigen-decomposition of the difference penalty, null space removed.

    Eigenvalues are returned in ascending order; each eigenvector's
    largest-magnitude entry is made positive so designs do not depend on the
    LAPACK sign convention.
    """
    if d.order != PENALTY_ORDER:
        raise ValueError(f"only difference order {PENALTY_ORDER} is supported, got {d.order}")
    pen = d.penalty.astype(float)
    evals, evecs = scipy.linalg.eigh(pen)
    scale = max(evals[-1], 1.0)
    if evals[0] < -tol * scale:
        raise ValueError("difference penalty is numerically indefinite")
    keep = evals > tol * scale
    nullity = int(np.count_nonzero(~keep))
    if nullity != d.order:
        raise ValueError(f"expected a null space of dimension {d.order}, found {nullity}")
    vecs = evecs[:, keep]
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    return EvdPenalty(vecs * signs, evals[keep], nullity)


@dataclass(frozen=True)
class CoordinateScaling:
    """Affine map of raw coordinates onto [-1, 1] (center at the midrange)."""

    center: float
    half_range: float

    @classmethod
    def from_values(cls, values) -> "CoordinateScaling":
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            raise ValueError("degenerate coordinates: all positions are equal")
        return cls(0.5 * (lo + hi), 0.5 * (hi - lo))

    def __call__(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.center) / self.half_range

    def inverse(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=float) * self.half_range + self.center


@dataclass(frozen=True)
class SpatialConfig:
    """Segments, degree and nesting divisors for the row (u) and column (v) margins."""

    nseg_u: int
    nseg_v: int
    degree: int = 3
    nest_div_u: int = 2
    nest_div_v: int = 2

    def __post_init__(self):
        for name in ("nseg_u", "nseg_v", "nest_div_u", "nest_div_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.degree < 1:
            raise ValueError("degree must be at least 1 (linear terms must be reproducible)")
        if self.nseg_u % self.nest_div_u:
            raise ValueError(f"nest_div_u={self.nest_div_u} does not divide nseg_u={self.nseg_u}")
        if self.nseg_v % self.nest_div_v:
            raise ValueError(f"nest_div_v={self.nest_div_v} does not divide nseg_v={self.nseg_v}")


@dataclass(frozen=True)
class KroneckerSumPrecision:
    """Diagonal of ``E_v (x) I + I (x) E_u`` stored as its two eigenvalue vectors.

    Entry ``i * len(eig_u) + j`` equals ``eig_v[i] + eig_u[j]``, matching the
    column order of ``row_kron(Z_v, Z_u)``.
    """

    eig_v: np.ndarray
    eig_u: np.ndarray

    def diagonal(self, weight_v: float = 1.0, weight_u: float = 1.0) -> np.ndarray:
        return (weight_v * self.eig_v[:, None] + weight_u * self.eig_u[None, :]).ravel()

    @property
    def size(self) -> int:
        return self.eig_v.size * self.eig_u.size


@dataclass(frozen=True)
class _Margin:
    knots: KnotVector
    nested: KnotVector
    evd: EvdPenalty
    evd_nested: EvdPenalty

    @classmethod
    def build(cls, nseg: int, degree: int, divisor: int) -> "_Margin":
        kv = make_knots(-1.0, 1.0, nseg, degree)
        kvn = nested_knots(kv, divisor)
        if kv.dim < 4:
            raise ValueError(f"basis dimension {kv.dim} is too small (need at least 4)")
        if kvn.dim < 3:
            raise ValueError(f"nested basis dimension {kvn.dim} is too small (need at least 3)")
        evd = evd_penalty(difference_matrix(kv.dim, PENALTY_ORDER))
        evdn = evd if kvn is kv else evd_penalty(difference_matrix(kvn.dim, PENALTY_ORDER))
        return cls(kv, kvn, evd, evdn)

    def z(self, x) -> np.ndarray:
        return eval_basis(self.knots, x).values @ self.evd.vectors_nonzero

    def z_nested(self, x) -> np.ndarray:
        return eval_basis(self.nested, x).values @ self.evd_nested.vectors_nonzero


@dataclass(frozen=True)
class PsAnovaDesign:
    """Fixed bilinear block, five random blocks and their precision structures."""

    config: SpatialConfig
    scale_u: CoordinateScaling
    scale_v: CoordinateScaling
    margin_u: _Margin = field(repr=False)
    margin_v: _Margin = field(repr=False)
    x_fixed: np.ndarray = field(repr=False)
    z_blocks: tuple = field(repr=False)

    @property
    def dims(self) -> dict:
        """Basis dimensions L, P and nested dimensions L_N, P_N."""
        return {
            "L": self.margin_u.knots.dim,
            "P": self.margin_v.knots.dim,
            "L_N": self.margin_u.nested.dim,
            "P_N": self.margin_v.nested.dim,
        }

    @property
    def precision_blocks(self) -> tuple:
        """Lambda_k^{-1} for the five blocks; the last one is a Kronecker sum."""
        ev = self.margin_v.evd.eigenvalues_nonzero
        eu = self.margin_u.evd.eigenvalues_nonzero
        kron = KroneckerSumPrecision(self.margin_v.evd_nested.eigenvalues_nonzero,
                                     self.margin_u.evd_nested.eigenvalues_nonzero)
        return (ev, eu, ev, eu, kron)

    def precision_diagonals(self) -> list[np.ndarray]:
        blocks = self.precision_blocks
        return [np.asarray(b) for b in blocks[:4]] + [blocks[4].diagonal()]

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(z.shape[1] for z in self.z_blocks)

    @property
    def n_coefficients(self) -> int:
        return self.x_fixed.shape[1] + sum(self.block_sizes)

    def evaluate(self, rows, cols) -> tuple[np.ndarray, list[np.ndarray]]:
        """Bilinear columns and the five random blocks at raw (row, col) positions."""
        u = self.scale_u(rows)
        v = self.scale_v(cols)
        return _bilinear(u, v), _smooth_blocks(self.margin_u, self.margin_v, u, v)

    def matched_precisions(self, lam_u: float, lam_v: float) -> list[np.ndarray]:
        """Block precisions reproducing the raw anisotropic P-spline penalty.

        With these Lambda_k^{-1}, unit block variances and unit residual
        variance, the mixed model returns the same fitted values as
        :func:`penalized_ls_fit` at smoothing parameters ``lam_u`` (rows) and
        ``lam_v`` (columns).  Only valid without nesting.
        """
        if self.config.nest_div_u != 1 or self.config.nest_div_v != 1:
            raise ValueError("matched precisions require un-nested bases")
        ku = self.margin_u.knots
        kv = self.margin_v.knots
        # squared norms of the coefficient vectors reproducing 1 and the linear coordinate
        one_u, lin_u = float(ku.dim), float(np.sum(ku.greville() ** 2))
        one_v, lin_v = float(kv.dim), float(np.sum(kv.greville() ** 2))
        ev = self.margin_v.evd.eigenvalues_nonzero
        eu = self.margin_u.evd.eigenvalues_nonzero
        kron = self.precision_blocks[4]
        return [
            lam_v * one_u * ev,
            lam_u * one_v * eu,
            lam_v * lin_u * ev,
            lam_u * lin_v * eu,
            kron.diagonal(weight_v=lam_v, weight_u=lam_u),
        ]


def _bilinear(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(u), u, v, u * v])


def _smooth_blocks(mu: _Margin, mv: _Margin, u: np.ndarray, v: np.ndarray) -> list[np.ndarray]:
    zu = mu.z(u)
    zv = mv.z(v)
    zun = zu if mu.nested is mu.knots else mu.z_nested(u)
    zvn = zv if mv.nested is mv.knots else mv.z_nested(v)
    return [zv, zu, zv * u[:, None], zu * v[:, None], row_kron(zvn, zun)]


def build_psanova(rows, cols, config: SpatialConfig,
                  scale_u: CoordinateScaling | None = None,
                  scale_v: CoordinateScaling | None = None) -> PsAnovaDesign:
    """PS-ANOVA design for plots at raw ``rows``/``cols`` positions.

    The scalings default to the midrange/half-range of the given positions;
    pass explicit scalings to cover a larger layout than the observed plots.
    """
    rows = np.asarray(rows, dtype=float).ravel()
    cols = np.asarray(cols, dtype=float).ravel()
    if rows.shape != cols.shape:
        raise ValueError("row and column coordinate vectors differ in length")
    scale_u = scale_u or CoordinateScaling.from_values(rows)
    scale_v = scale_v or CoordinateScaling.from_values(cols)
    mu = _Margin.build(config.nseg_u, config.degree, config.nest_div_u)
    mv = _Margin.build(config.nseg_v, config.degree, config.nest_div_v)
    u = scale_u(rows)
    v = scale_v(cols)
    return PsAnovaDesign(config, scale_u, scale_v, mu, mv,
                         _bilinear(u, v), tuple(_smooth_blocks(mu, mv, u, v)))


def tensor_penalty(dim_u: int, dim_v: int, lam_u: float, lam_v: float,
                   order: int = PENALTY_ORDER) -> np.ndarray:
    """Anisotropic penalty for coefficients ordered as ``row_kron(B_v, B_u)``."""
    pu = difference_matrix(dim_u, order).penalty.astype(float)
    pv = difference_matrix(dim_v, order).penalty.astype(float)
    return lam_u * np.kron(np.eye(dim_v), pu) + lam_v * np.kron(pv, np.eye(dim_u))


def penalized_ls_fit(b_u, b_v, y, lam_u: float, lam_v: float) -> np.ndarray:
    """Minimizer of ``|y - B a|^2 + a' P a`` for the raw tensor-product basis.

    ``B = row_kron(b_v, b_u)`` and ``P`` penalizes second differences along
    rows (``lam_u``) and columns (``lam_v``).
    """
    if lam_u <= 0 or lam_v <= 0:
        raise ValueError("smoothing parameters must be strictly positive")
    b_u = np.asarray(b_u, dtype=float)
    b_v = np.asarray(b_v, dtype=float)
    basis = row_kron(b_v, b_u)
    lhs = basis.T @ basis + tensor_penalty(b_u.shape[1], b_v.shape[1], lam_u, lam_v)
    try:
        factor = scipy.linalg.cho_factor(lhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("penalized normal matrix is singular") from exc
    return scipy.linalg.cho_solve(factor, basis.T @ np.asarray(y, dtype=float))
