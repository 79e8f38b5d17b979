"""Post-fit summaries: effective dimensions, trend decomposition, variogram."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .psanova import BILINEAR_NAMES, BLOCK_NAMES
from .reml import FittedModel

# display order of the three unpenalized spatial columns
_LINEAR_ORDER = ("col", "row", "row:col")


@dataclass(frozen=True)
class EdRow:
    name: str
    effective: float
    model_dim: int
    nominal_dim: int
    type_code: str

    @property
    def ratio(self) -> float:
        return self.effective / self.nominal_dim if self.nominal_dim else 0.0


@dataclass(frozen=True)
class EdTable:
    rows: tuple
    total: EdRow
    residual: float
    n: int

    def row(self, name: str) -> EdRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def identity_gap(self) -> float:
        """``n - (total effective + residual)``; zero up to rounding."""
        return self.n - self.total.effective - self.residual


def _spatial(model: FittedModel):
    asm = model.assembled
    return None if asm is None else asm.spatial


def ed_table(model: FittedModel) -> EdTable:
    """Effective, model and nominal dimension of every model component.

    Order: non-spatial fixed terms, Intercept, non-spatial random blocks,
    the linear spatial columns, then the five smooth blocks.  Random
    factors lose one nominal dimension to their zero-mean constraint;
    smooth blocks do not.
    """
    d = model.design
    terms = {t.name: t for t in d.fixed_terms}
    spatial_fixed = set(BILINEAR_NAMES) if _spatial(model) is not None else {"Intercept"}
    rows: list[EdRow] = []
    for t in d.fixed_terms:
        if t.name not in spatial_fixed:
            rows.append(EdRow(t.name, float(t.size), t.size, t.size, "F"))
    if "Intercept" in terms:
        rows.append(EdRow("Intercept", 1.0, 1, 1, "F"))
    smooth = []
    for b, ed in zip(d.blocks, model.effective_dims):
        if b.kind == "spatial":
            smooth.append(EdRow(b.name, float(ed), b.size, b.size, "S"))
        else:
            rows.append(EdRow(b.name, float(ed), b.size, b.size - 1, "R"))
    if _spatial(model) is not None:
        for name in _LINEAR_ORDER:
            if name in terms:
                rows.append(EdRow(name, 1.0, 1, 1, "S"))
    rows.extend(smooth)
    # fixed terms count by rank, which equals their column count after the rank check
    total = EdRow("Total", model.total_ed, sum(r.model_dim for r in rows),
                  sum(r.nominal_dim for r in rows), "")
    return EdTable(tuple(rows), total, model.ed_residual, d.n)


def spatial_ed(model: FittedModel) -> float:
    """ED of the spatial surface without the intercept: five smooth blocks plus 3."""
    d = model.design
    eds = [e for b, e in zip(d.blocks, model.effective_dims) if b.kind == "spatial"]
    if not eds:
        raise ValueError("model has no spatial component")
    return float(np.sum(eds)) + len(BILINEAR_NAMES) - 1


@dataclass(frozen=True)
class SurfaceDecomposition:
    """Spatial trend components at a set of raw (row, col) positions."""

    rows: np.ndarray
    cols: np.ndarray
    components: dict
    total: np.ndarray


def decompose_surface(model: FittedModel, points, include_intercept: bool = True
                      ) -> SurfaceDecomposition:
    """Split the fitted spatial trend into its ANOVA-type components.

    ``points`` is a :class:`~spats.assembly.PredictionGrid` or a pair of
    raw ``(rows, cols)`` arrays.  Components are ``bilinear`` followed by
    the five smooth blocks; ``total`` is their sum.
    """
    spatial = _spatial(model)
    if spatial is None:
        raise ValueError("model has no spatial component")
    if hasattr(points, "points"):
        rows, cols = points.points()
    else:
        rows, cols = (np.asarray(p, dtype=float).ravel() for p in points)
    try:
        xb, zs = spatial.evaluate(rows, cols)
    except ValueError as exc:
        raise ValueError(f"prediction points outside the training domain: {exc}") from None
    d = model.design
    idx = [next(t.start for t in d.fixed_terms if t.name == nm) for nm in BILINEAR_NAMES]
    beta = model.result.beta[idx].copy()
    if not include_intercept:
        beta[0] = 0.0
    comps = {"bilinear": xb @ beta}
    for name, z in zip(BLOCK_NAMES, zs):
        comps[name] = z @ model.result.c[d.block_index(name)]
    total = np.zeros_like(rows, dtype=float)
    for v in comps.values():
        total = total + v
    return SurfaceDecomposition(np.asarray(rows, float), np.asarray(cols, float), comps, total)


def spatial_fitted(model: FittedModel, include_intercept: bool = True) -> np.ndarray:
    """In-sample spatial trend at the observed plots, ``X_s b_s + Z_s c_s``."""
    d = model.design
    idx = [next(t.start for t in d.fixed_terms if t.name == nm) for nm in BILINEAR_NAMES]
    beta = model.result.beta[idx].copy()
    if not include_intercept:
        beta[0] = 0.0
    out = d.x[:, idx] @ beta
    for name in BLOCK_NAMES:
        k = d.block_index(name)
        out = out + d.blocks[k].z @ model.result.c[k]
    return out


@dataclass(frozen=True)
class VariogramTable:
    row_displacement: np.ndarray
    col_displacement: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def __len__(self) -> int:
        return self.value.size

    def at(self, drow: int, dcol: int) -> float:
        hit = (self.row_displacement == abs(drow)) & (self.col_displacement == abs(dcol))
        if not hit.any():
            raise KeyError((drow, dcol))
        return float(self.value[hit][0])


def variogram(rows, cols, values) -> VariogramTable:
    """Sample variogram of values on integer plot positions.

    For every absolute displacement ``(|drow|, |dcol|)`` the value is the
    mean of ``(e_p - e_q)^2 / 2`` over all unordered plot pairs at that
    displacement; displacements without pairs are omitted.
    """
    rows = np.asarray(rows, dtype=int).ravel()
    cols = np.asarray(cols, dtype=int).ravel()
    e = np.asarray(values, dtype=float).ravel()
    if not rows.size == cols.size == e.size:
        raise ValueError("rows, cols and values differ in length")
    if e.size < 2:
        raise ValueError("a variogram needs at least two plots")
    r = rows - rows.min()
    c = cols - cols.min()
    nr, nc = r.max() + 1, c.max() + 1
    grid = np.zeros((nr, nc))
    mask = np.zeros((nr, nc), dtype=bool)
    grid[r, c] = e
    mask[r, c] = True

    out_r, out_c, out_v, out_n = [], [], [], []
    for dr in range(nr):
        for dc in range(nc):
            shifts = [(dr, dc)] if dr == 0 or dc == 0 else [(dr, dc), (dr, -dc)]
            total, count = 0.0, 0
            for sr, sc in shifts:
                a, b = _shifted(grid, mask, sr, sc)
                if a is None:
                    continue
                m = a[1] & b[1]
                count += int(m.sum())
                total += float(np.sum((a[0][m] - b[0][m]) ** 2))
            if dr == 0 and dc == 0:
                count = int(mask.sum())
                total = 0.0
            if count:
                out_r.append(dr)
                out_c.append(dc)
                out_v.append(0.5 * total / count)
                out_n.append(count)
    return VariogramTable(np.array(out_r), np.array(out_c), np.array(out_v), np.array(out_n))


def _shifted(grid, mask, sr, sc):
    nr, nc = grid.shape
    if sr >= nr or abs(sc) >= nc:
        return None, None
    r0 = slice(0, nr - sr)
    r1 = slice(sr, nr)
    if sc >= 0:
        c0, c1 = slice(0, nc - sc), slice(sc, nc)
    else:
        c0, c1 = slice(-sc, nc), slice(0, nc + sc)
    return (grid[r0, c0], mask[r0, c0]), (grid[r1, c1], mask[r1, c1])


def sample_variogram(model: FittedModel) -> VariogramTable:
    """Variogram of the residuals of a model built by ``build_system``."""
    asm = model.assembled
    if asm is None:
        raise ValueError("plot positions need a model built by build_system")
    obs = asm.labels.observed
    return variogram(asm.data.rows[obs], asm.data.cols[obs], model.result.residuals)
