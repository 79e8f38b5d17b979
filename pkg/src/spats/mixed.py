"""Henderson mixed-model equations with diagonal-precision random blocks.

Model: ``y = X b + sum_k Z_k c_k + e`` with ``c_k ~ N(0, s_k^2 Lambda_k)``,
``Lambda_k`` diagonal, and ``e ~ N(0, s^2 I)``.  Only the diagonals of
``Lambda_k^{-1}`` (``precision``) are stored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

# chunk width for triangular solves against unit vectors
_INV_CHUNK = 1024
# incidence blocks at least this large are eliminated by a Schur complement
ABSORB_MIN = 64


class CollinearityError(ValueError):
    """The fixed-effects design is rank deficient."""


class FactorizationError(np.linalg.LinAlgError):
    """The mixed-model coefficient matrix is not numerically positive definite."""


@dataclass(frozen=True)
class RandomBlock:
    name: str
    z: np.ndarray
    precision: np.ndarray
    kind: str = "random"

    def __post_init__(self):
        z = self.z
        if scipy.sparse.issparse(z):
            z = z.toarray()
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        prec = np.broadcast_to(np.asarray(self.precision, dtype=float), (z.shape[1],)).copy()
        if not np.all(prec > 0):
            raise ValueError(f"block {self.name!r}: precision entries must be positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "precision", prec)

    @property
    def size(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class FixedTerm:
    """A named group of consecutive fixed-effect columns."""

    name: str
    start: int
    stop: int
    type_code: str = "F"

    @property
    def size(self) -> int:
        return self.stop - self.start


class MixedModelDesign:
    """Fixed design, random blocks and response, with cached cross-products.

    The rank of ``x`` is validated at construction; collinear columns are
    reported by name.
    """

    def __init__(self, x, blocks: Sequence[RandomBlock], y, x_names: Sequence[str] | None = None,
                 fixed_terms: Sequence[FixedTerm] | None = None):
        x = np.asarray(x.toarray() if scipy.sparse.issparse(x) else x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(y, dtype=float).ravel()
        if x.shape[0] != y.size:
            raise ValueError(f"X has {x.shape[0]} rows but y has {y.size} entries")
        for b in blocks:
            if b.z.shape[0] != y.size:
                raise ValueError(f"block {b.name!r} has {b.z.shape[0]} rows, expected {y.size}")
        names = list(x_names) if x_names is not None else [f"x{j}" for j in range(x.shape[1])]
        if len(names) != x.shape[1]:
            raise ValueError("x_names length does not match the number of fixed columns")
        self.x = x
        self.y = y
        self.blocks = tuple(blocks)
        self.x_names = tuple(names)
        if fixed_terms is None:
            fixed_terms = [FixedTerm(n, j, j + 1) for j, n in enumerate(names)]
        self.fixed_terms = tuple(fixed_terms)
        self.rank_x = _check_rank(x, names)
        if y.size <= self.rank_x:
            raise ValueError("need more observations than fixed-effect columns")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    @property
    def n_coefficients(self) -> int:
        return self.p + sum(self.block_sizes)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start index of every block inside the stacked coefficient vector."""
        return self.p + np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(int)

    @cached_property
    def w(self) -> np.ndarray:
        return np.hstack([self.x] + [b.z for b in self.blocks])

    @cached_property
    def wtw(self) -> np.ndarray:
        return self.w.T @ self.w

    @cached_property
    def wty(self) -> np.ndarray:
        return self.w.T @ self.y

    @cached_property
    def precision(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.precision for b in self.blocks])

    @cached_property
    def absorb_plan(self):
        """Elimination plan for the largest block with diagonal ``Z'Z`` (or None).

        Such a block (an incidence matrix with one entry per row) has a
        diagonal corner in ``C``, so it can be eliminated cheaply before the
        dense factorization of the remaining coefficients.
        """
        best = None
        for k, b in enumerate(self.blocks):
            if b.size < ABSORB_MIN or np.max(np.count_nonzero(b.z, axis=1)) > 1:
                continue
            if best is None or b.size > self.blocks[best].size:
                best = k
        if best is None:
            return None
        lo, hi = self.offsets[best], self.offsets[best + 1]
        keep = np.r_[0:lo, hi:self.n_coefficients]
        gram = self.wtw
        return _AbsorbPlan(best, keep, np.arange(lo, hi), gram[np.ix_(keep, keep)],
                           gram[np.ix_(keep, np.arange(lo, hi))], np.diag(gram)[lo:hi].copy())

    def block_index(self, name: str) -> int:
        for k, b in enumerate(self.blocks):
            if b.name == name:
                return k
        raise KeyError(name)

    def with_response(self, y) -> "MixedModelDesign":
        """Same design, new response; the heavy cross-products are shared."""
        new = object.__new__(MixedModelDesign)
        new.__dict__.update({k: v for k, v in self.__dict__.items() if k not in ("wty", "y")})
        new.y = np.asarray(y, dtype=float).ravel()
        if new.y.size != self.n:
            raise ValueError("response length does not match the design")
        return new


@dataclass(frozen=True)
class _AbsorbPlan:
    block: int
    keep: np.ndarray
    absorb: np.ndarray
    gram_kk: np.ndarray
    gram_ka: np.ndarray
    gram_aa: np.ndarray


def _check_rank(x: np.ndarray, names: Sequence[str]) -> int:
    p = x.shape[1]
    if p == 0:
        return 0
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(x.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
    rank = int(np.count_nonzero(diag > tol))
    if rank < p:
        # name the columns that depend on the columns before them
        _, r0 = scipy.linalg.qr(x, mode="economic")
        norms = np.linalg.norm(x, axis=0)
        dep = [names[j] for j in range(p) if abs(r0[j, j]) <= 1e-8 * max(norms[j], 1e-300)]
        dropped = dep or sorted(names[j] for j in piv[rank:])
        raise CollinearityError(f"fixed-effect columns are collinear: {', '.join(dropped)}")
    return rank


@dataclass(frozen=True)
class MixedModelSystem:
    """A design together with the residual and per-block variances."""

    design: MixedModelDesign
    sigma2: float
    variances: np.ndarray

    def __post_init__(self):
        var = np.asarray(self.variances, dtype=float).ravel()
        if var.size != len(self.design.blocks):
            raise ValueError(f"expected {len(self.design.blocks)} variances, got {var.size}")
        if not self.sigma2 > 0 or not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "variances", var)

    def ginv_diagonal(self) -> np.ndarray:
        d = self.design
        if not d.blocks:
            return np.zeros(0)
        return d.precision / np.repeat(self.variances, d.block_sizes)


@dataclass(frozen=True)
class SolveResult:
    beta: np.ndarray
    c: tuple
    cinv_diag: tuple
    logdet_c: float
    fitted: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.beta, *self.c])


def assemble(system: MixedModelSystem) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient matrix ``C`` and right-hand side of the Henderson equations."""
    d = system.design
    c = d.wtw / system.sigma2
    idx = np.arange(d.p, d.n_coefficients)
    c[idx, idx] += system.ginv_diagonal()
    return c, d.wty / system.sigma2


def _locate(design: MixedModelDesign, index: int) -> str:
    if index < design.p:
        return f"fixed column {design.x_names[index]!r}"
    k = int(np.searchsorted(design.offsets, index, side="right")) - 1
    return f"random block {design.blocks[k].name!r}"


def _cholesky(mat: np.ndarray, index: np.ndarray, design: MixedModelDesign) -> np.ndarray:
    chol, info = scipy.linalg.lapack.dpotrf(mat, lower=1, clean=1, overwrite_a=1)
    if info != 0:
        where = _locate(design, int(index[info - 1])) if info > 0 else "argument check"
        raise FactorizationError(f"Cholesky factorization failed at pivot {info - 1} ({where})")
    return chol


def _inverse_diagonal(chol: np.ndarray, start: int) -> np.ndarray:
    """Diagonal of ``(L L')^{-1}`` from row ``start`` on, via chunked unit solves."""
    m = chol.shape[0]
    out = np.empty(m - start)
    for lo in range(start, m, _INV_CHUNK):
        hi = min(lo + _INV_CHUNK, m)
        unit = np.zeros((m - lo, hi - lo))
        unit[np.arange(hi - lo), np.arange(hi - lo)] = 1.0
        # entries of C^{-1} e_i only need rows >= i of the lower factor
        sol = scipy.linalg.solve_triangular(chol[lo:, lo:], unit, lower=True, check_finite=False)
        out[lo - start:hi - start] = np.einsum("ij,ij->j", sol, sol)
    return out


def solve(system: MixedModelSystem, absorb: bool = True) -> SolveResult:
    """BLUEs, BLUPs and the random-block diagonals of ``C^{-1}``.

    With ``absorb`` the largest incidence block (see
    :attr:`MixedModelDesign.absorb_plan`) is eliminated first; the result is
    the same as the plain dense solve up to rounding.
    """
    d = system.design
    plan = d.absorb_plan if absorb else None
    if plan is None:
        cmat, rhs = assemble(system)
        chol = _cholesky(cmat, np.arange(d.n_coefficients), d)
        theta = scipy.linalg.cho_solve((chol, True), rhs)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        cinv = _inverse_diagonal(chol, d.p)
    else:
        theta, logdet, cinv = _solve_absorbed(system, plan)

    beta = theta[:d.p]
    offs = d.offsets
    c = tuple(theta[offs[k]:offs[k + 1]] for k in range(len(d.blocks)))
    cdiag = tuple(cinv[offs[k] - d.p:offs[k + 1] - d.p] for k in range(len(d.blocks)))
    fitted = d.w @ theta
    return SolveResult(beta, c, cdiag, logdet, fitted, d.y - fitted)


def _solve_absorbed(system: MixedModelSystem, plan: _AbsorbPlan):
    d = system.design
    s2 = system.sigma2
    ginv = system.ginv_diagonal()
    rhs = d.wty / s2
    keep, absorb = plan.keep, plan.absorb
    # corner of C belonging to the eliminated block is diagonal
    dvec = plan.gram_aa / s2 + ginv[absorb - d.p]
    b = plan.gram_ka / s2
    bd = b / dvec
    schur = plan.gram_kk / s2 - bd @ b.T
    kidx = keep[keep >= d.p]
    schur[np.searchsorted(keep, kidx), np.searchsorted(keep, kidx)] += ginv[kidx - d.p]
    chol = _cholesky(schur, keep, d)
    theta_k = scipy.linalg.cho_solve((chol, True), rhs[keep] - bd @ rhs[absorb])
    theta_a = (rhs[absorb] - b.T @ theta_k) / dvec
    logdet = float(np.sum(np.log(dvec))) + 2.0 * float(np.sum(np.log(np.diag(chol))))

    theta = np.empty(d.n_coefficients)
    theta[keep] = theta_k
    theta[absorb] = theta_a
    cinv = np.empty(d.n_coefficients - d.p)
    # kept coefficients are ordered with the fixed ones first
    cinv[kidx - d.p] = _inverse_diagonal(chol, d.p)
    m = scipy.linalg.solve_triangular(chol, bd, lower=True, check_finite=False)
    cinv[absorb - d.p] = 1.0 / dvec + np.einsum("ij,ij->j", m, m)
    return theta, logdet, cinv


def component_traces(system: MixedModelSystem, result: SolveResult) -> np.ndarray:
    """Effective dimension of every random block, ``trace(I - Lambda^{-1} C^{-1}_kk / s_k^2)``."""
    d = system.design
    ed = np.array([
        b.size - float(np.sum(b.precision * cd)) / var
        for b, cd, var in zip(d.blocks, result.cinv_diag, system.variances)
    ])
    if np.any(ed < -1e-8):
        k = int(np.argmin(ed))
        raise FloatingPointError(
            f"negative effective dimension {ed[k]:.3g} for block {d.blocks[k].name!r}")
    return ed


def residual_ed(system: MixedModelSystem, eds: np.ndarray) -> float:
    d = system.design
    return d.n - d.rank_x - float(np.sum(eds))


def reml_deviance(system: MixedModelSystem, result: SolveResult) -> float:
    """Minus twice the REML log-likelihood, without the ``(n - p) log 2 pi`` constant.

    Uses ``log|V| + log|X'V^{-1}X| = n log s^2 + log|G| + log|C|`` and
    ``y'Py = y'(y - fitted) / s^2``.
    """
    d = system.design
    logdet_g = 0.0
    for b, var in zip(d.blocks, system.variances):
        logdet_g += b.size * np.log(var) - float(np.sum(np.log(b.precision)))
    quad = float(d.y @ result.residuals) / system.sigma2
    dev = d.n * np.log(system.sigma2) + logdet_g + result.logdet_c + quad
    if not np.isfinite(dev):
        raise FloatingPointError("REML deviance is not finite")
    return float(dev)
