"""Translate field-trial records and a model specification into a mixed model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .mixed import FixedTerm, MixedModelDesign, RandomBlock
from .psanova import (
    BILINEAR_NAMES,
    BLOCK_NAMES,
    CoordinateScaling,
    PsAnovaDesign,
    SpatialConfig,
    build_psanova,
)
from .reml import FitOptions, FittedModel, fit


class ModelSpecError(ValueError):
    """The model specification does not resolve against the trial data."""


@dataclass(frozen=True)
class PlotRecord:
    response: float
    genotype: str
    row: int
    col: int
    factors: Mapping[str, str] = field(default_factory=dict)
    covariates: Mapping[str, float] = field(default_factory=dict)

    @property
    def missing(self) -> bool:
        return self.response is None or math.isnan(self.response)


@dataclass(frozen=True)
class TrialData:
    records: tuple

    def __post_init__(self):
        recs = tuple(self.records)
        object.__setattr__(self, "records", recs)
        if not recs:
            raise ValueError("trial data has no records")
        seen = {}
        for i, r in enumerate(recs):
            key = (r.row, r.col)
            if key in seen:
                raise ValueError(f"duplicate plot position row={r.row}, col={r.col} "
                                 f"(records {seen[key]} and {i})")
            seen[key] = i
        fkeys, ckeys = set(recs[0].factors), set(recs[0].covariates)
        for i, r in enumerate(recs):
            if set(r.factors) != fkeys or set(r.covariates) != ckeys:
                raise ValueError(f"record {i} does not carry the same factors/covariates as record 0")
        if all(r.missing for r in recs):
            raise ValueError("all responses are missing")

    @classmethod
    def from_arrays(cls, response, genotype, row, col, factors: Mapping[str, Sequence] | None = None,
                    covariates: Mapping[str, Sequence] | None = None) -> "TrialData":
        factors = factors or {}
        covariates = covariates or {}
        recs = []
        for i in range(len(response)):
            y = response[i]
            recs.append(PlotRecord(
                float("nan") if y is None else float(y),
                str(genotype[i]), int(row[i]), int(col[i]),
                {k: str(v[i]) for k, v in factors.items()},
                {k: float(v[i]) for k, v in covariates.items()},
            ))
        return cls(tuple(recs))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def response(self) -> np.ndarray:
        return np.array([np.nan if r.missing else r.response for r in self.records])

    @property
    def rows(self) -> np.ndarray:
        return np.array([r.row for r in self.records])

    @property
    def cols(self) -> np.ndarray:
        return np.array([r.col for r in self.records])

    @property
    def genotypes(self) -> list[str]:
        return [r.genotype for r in self.records]

    @property
    def observed(self) -> np.ndarray:
        """Indices of records with a response."""
        return np.flatnonzero([not r.missing for r in self.records])

    @property
    def layout(self) -> tuple[int, int, int, int]:
        """``(row_min, row_max, col_min, col_max)`` over all records."""
        rows, cols = self.rows, self.cols
        return int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())

    def labels(self, name: str) -> list[str]:
        """Per-record labels of a factor.

        Covariates are relabelled by value, and ``row``/``col`` (or
        ``row_f``/``col_f``) fall back to the plot positions.
        """
        first = self.records[0]
        if name in first.factors:
            return [r.factors[name] for r in self.records]
        if name in first.covariates:
            return [_label(r.covariates[name]) for r in self.records]
        if name in ("row", "row_f"):
            return [str(r.row) for r in self.records]
        if name in ("col", "col_f"):
            return [str(r.col) for r in self.records]
        raise ModelSpecError(f"unknown factor {name!r}")

    def has_covariate(self, name: str) -> bool:
        return name in self.records[0].covariates


def _label(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    ``genotype_role`` is ``"fixed"``, ``"random"`` or ``"none"``.  With a
    random genotype, labels listed in ``checks`` are fitted as fixed
    indicator columns instead.  ``spatial`` is a :class:`SpatialConfig`,
    ``"auto"`` (segments = number of distinct rows/columns) or ``None``.
    """

    genotype_role: str = "fixed"
    fixed: tuple = ()
    random: tuple = ()
    checks: tuple = ()
    spatial: object = "auto"
    genotype_name: str = "genotype"

    def __post_init__(self):
        if self.genotype_role not in ("fixed", "random", "none"):
            raise ModelSpecError(f"genotype_role must be fixed, random or none, "
                                 f"got {self.genotype_role!r}")
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        object.__setattr__(self, "checks", tuple(self.checks))
        if self.checks and self.genotype_role != "random":
            raise ModelSpecError("check genotypes are only meaningful with a random genotype")
        if not (self.spatial is None or self.spatial == "auto" or isinstance(self.spatial, SpatialConfig)):
            raise ModelSpecError("spatial must be a SpatialConfig, 'auto' or None")
        dup = set(self.fixed) & set(self.random)
        if dup:
            raise ModelSpecError(f"terms declared both fixed and random: {sorted(dup)}")


def default_spatial_config(data: TrialData, degree: int = 3) -> SpatialConfig:
    """One segment per distinct row/column, nested with divisor 2 where it divides."""
    nu = len(set(data.rows.tolist()))
    nv = len(set(data.cols.tolist()))
    return SpatialConfig(nu, nv, degree, 2 if nu % 2 == 0 else 1, 2 if nv % 2 == 0 else 1)


@dataclass(frozen=True)
class LabelMaps:
    observed: np.ndarray
    genotype_levels: tuple = ()
    genotype_fixed_levels: tuple = ()
    factor_levels: Mapping[str, tuple] = field(default_factory=dict)
    x_names: tuple = ()


@dataclass(frozen=True)
class AssembledModel:
    design: MixedModelDesign = field(repr=False)
    spatial: Optional[PsAnovaDesign] = field(repr=False)
    labels: LabelMaps = field(repr=False)
    data: TrialData = field(repr=False)
    spec: ModelSpec


def _levels(labels: Sequence[str], observed: np.ndarray, what: str) -> tuple:
    all_levels = set(labels)
    seen = {labels[i] for i in observed}
    unseen = sorted(all_levels - seen)
    if unseen:
        raise ModelSpecError(f"{what} levels occur only in plots with a missing response: "
                             f"{', '.join(unseen)}")
    return tuple(sorted(seen))


def _incidence(labels: Sequence[str], levels: Sequence[str]) -> np.ndarray:
    pos = {lv: j for j, lv in enumerate(levels)}
    out = np.zeros((len(labels), len(levels)))
    for i, lab in enumerate(labels):
        j = pos.get(lab)
        if j is not None:
            out[i, j] = 1.0
    return out


def build_system(data: TrialData, spec: ModelSpec) -> AssembledModel:
    """Mixed-model design for ``data`` under ``spec``.

    Plots with a missing response are dropped from every design matrix but
    still define the spatial domain used for prediction.  Random blocks are
    ordered as: the five spatial blocks, the genotype (if random), then the
    random factors in declaration order.
    """
    obs = data.observed
    y = data.response[obs]
    geno = [data.genotypes[i] for i in obs]

    xcols: list[np.ndarray] = []
    xnames: list[str] = []
    terms: list[FixedTerm] = []
    blocks: list[RandomBlock] = []

    def add_fixed(name, cols, colnames, code="F"):
        start = len(xnames)
        xcols.extend(cols.T)
        xnames.extend(colnames)
        terms.append(FixedTerm(name, start, len(xnames), code))

    spatial = None
    config = spec.spatial
    if config == "auto":
        config = default_spatial_config(data)
    if config is not None:
        r0, r1, c0, c1 = data.layout
        spatial = build_psanova(data.rows[obs], data.cols[obs], config,
                                CoordinateScaling.from_values([r0, r1]),
                                CoordinateScaling.from_values([c0, c1]))
        for j, nm in enumerate(BILINEAR_NAMES):
            add_fixed(nm, spatial.x_fixed[:, j:j + 1], [nm], "F" if j == 0 else "S")
        for nm, z, prec in zip(BLOCK_NAMES, spatial.z_blocks, spatial.precision_diagonals()):
            blocks.append(RandomBlock(nm, z, prec, kind="spatial"))
    else:
        add_fixed("Intercept", np.ones((len(obs), 1)), ["Intercept"])

    all_geno = data.genotypes
    gname = spec.genotype_name
    geno_levels: tuple = ()
    geno_fixed: tuple = ()
    if spec.genotype_role == "fixed":
        levels = _levels(all_geno, obs, "genotype")
        geno_fixed = levels[1:]
        if geno_fixed:
            add_fixed(gname, _incidence(geno, geno_fixed), [f"{gname}[{g}]" for g in geno_fixed])
    elif spec.genotype_role == "random":
        checks = set(spec.checks)
        missing_checks = checks - set(all_geno)
        if missing_checks:
            raise ModelSpecError(f"check genotypes not present in the data: {sorted(missing_checks)}")
        obs_set = set(obs.tolist())
        line_idx = [i for i, g in enumerate(all_geno) if g not in checks]
        geno_levels = _levels([all_geno[i] for i in line_idx],
                              [k for k, i in enumerate(line_idx) if i in obs_set], "genotype")
        if spec.checks:
            check_idx = [i for i, g in enumerate(all_geno) if g in checks]
            geno_fixed = _levels([all_geno[i] for i in check_idx],
                                 [k for k, i in enumerate(check_idx) if i in obs_set], "check")
            add_fixed("checks", _incidence(geno, geno_fixed), [f"check[{g}]" for g in geno_fixed])
        blocks.append(RandomBlock(gname, _incidence(geno, geno_levels), 1.0, kind="genotype"))

    reserved = set(BILINEAR_NAMES) | set(BLOCK_NAMES) | {"Residual", "Total", "Nobs", "checks"}
    if spatial is None:
        reserved -= set(BILINEAR_NAMES) | set(BLOCK_NAMES)
        reserved.add("Intercept")
    reserved.add(gname)
    for name in spec.fixed + spec.random:
        if name in reserved:
            hint = f"; use {name}_f for the plot {name} factor" if name in ("row", "col") else ""
            raise ModelSpecError(f"term name {name!r} clashes with a built-in term{hint}")

    factor_levels = {}
    for name in spec.fixed:
        if data.has_covariate(name):
            vals = np.array([data.records[i].covariates[name] for i in obs])
            if np.isnan(vals).any():
                raise ModelSpecError(f"covariate {name!r} is missing on plots with a response")
            add_fixed(name, vals[:, None], [name])
            continue
        labels = data.labels(name)
        levels = _levels(labels, obs, f"factor {name!r}")
        factor_levels[name] = levels
        kept = levels[1:]
        if kept:
            add_fixed(name, _incidence([labels[i] for i in obs], kept), [f"{name}[{lv}]" for lv in kept])
    for name in spec.random:
        labels = data.labels(name)
        levels = _levels(labels, obs, f"factor {name!r}")
        factor_levels[name] = levels
        blocks.append(RandomBlock(name, _incidence([labels[i] for i in obs], levels), 1.0))

    x = np.column_stack(xcols)
    design = MixedModelDesign(x, blocks, y, xnames, terms)
    labels = LabelMaps(obs, geno_levels, geno_fixed, factor_levels, tuple(xnames))
    return AssembledModel(design, spatial, labels, data, spec)


def fit_trial(data: TrialData, spec: ModelSpec, options: FitOptions | None = None, **kw) -> FittedModel:
    """Assemble and fit in one call."""
    return fit(build_system(data, spec), options, **kw)


@dataclass(frozen=True)
class PredictionGrid:
    """Regular grid of raw (row, col) positions covering the field layout.

    ``inside[i, j]`` is False where the nearest plot position holds no record
    (irregular or missing parts of the field).
    """

    rows: np.ndarray
    cols: np.ndarray
    inside: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.size, self.cols.size

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (row, col) coordinates, row-major."""
        rr, cc = np.meshgrid(self.rows, self.cols, indexing="ij")
        return rr.ravel(), cc.ravel()


def prediction_grid(data: TrialData, resolution, extent=None) -> PredictionGrid:
    """Grid with ``resolution = (n_rows, n_cols)`` points.

    The grid spans ``extent = (row_min, row_max, col_min, col_max)``, by
    default the layout of all records.  It must not be coarser than one
    point per plot row/column of the extent.
    """
    if np.isscalar(resolution):
        resolution = (resolution, resolution)
    nr, nc = (int(r) for r in resolution)
    r0, r1, c0, c1 = data.layout if extent is None else extent
    if nr <= 0 or nc <= 0:
        raise ValueError("grid resolution must be positive")
    if r1 < r0 or c1 < c0:
        raise ValueError("grid extent is empty")
    need_r = int(math.floor(r1 - r0)) + 1
    need_c = int(math.floor(c1 - c0)) + 1
    if nr < need_r or nc < need_c:
        raise ValueError(f"grid resolution {nr}x{nc} is coarser than the layout {need_r}x{need_c}")
    rows = np.linspace(r0, r1, nr)
    cols = np.linspace(c0, c1, nc)
    occupied = {(r.row, r.col) for r in data.records}
    near_r = np.rint(rows).astype(int)
    near_c = np.rint(cols).astype(int)
    inside = np.array([[(a, b) in occupied for b in near_c] for a in near_r])
    return PredictionGrid(rows, cols, inside)
