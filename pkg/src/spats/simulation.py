"""Synthetic field trials with separable AR(1) x AR(1) errors and a study harness."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .assembly import ModelSpec, TrialData, build_system
from .diagnostics import spatial_ed
from .psanova import SpatialConfig
from .reml import ConvergenceWarning, FitOptions, fit

VARIANTS = ("spats", "oracle")
FILLER = "filler"


@dataclass(frozen=True)
class SimulationConfig:
    """One scenario of the AR x AR study.

    Genotypes are laid out in a resolvable design; the fitted model is the
    PS-ANOVA surface plus a random genotype block.  ``oracle`` computes the
    BLUPs from the true covariance matrix instead of estimated variances.
    """

    n_rows: int = 10
    n_cols: int = 20
    m_g: int = 100
    replicates: int = 2
    block_size: int = 10
    sigma2_g: float = 1.0
    sigma2_s: float = 1.0
    sigma2: float = 1.0
    rho_r: float = 0.5
    rho_c: float = 0.5
    n_runs: int = 50
    seed: int = 2024
    nseg_row: int = 10
    nseg_col: int = 20
    degree: int = 3
    nest_div: int = 2
    tolerance: float = 1e-6
    max_iter: int = 1000
    variants: tuple = ("spats",)

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("layout must have at least one row and column")
        if self.m_g < 1 or self.replicates < 1:
            raise ValueError("need at least one genotype and one replicate")
        if self.m_g * self.replicates > self.n_rows * self.n_cols:
            raise ValueError(f"{self.m_g} genotypes x {self.replicates} replicates do not fit "
                             f"into {self.n_rows * self.n_cols} plots")
        for name in ("rho_r", "rho_c"):
            rho = getattr(self, name)
            if not 0.0 < rho < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {rho}")
        for name in ("sigma2_g", "sigma2_s", "sigma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown or not self.variants:
            raise ValueError(f"variants must be drawn from {VARIANTS}")

    @property
    def n_plots(self) -> int:
        return self.n_rows * self.n_cols

    def spatial_config(self) -> SpatialConfig:
        return SpatialConfig(self.nseg_row, self.nseg_col, self.degree,
                             self.nest_div if self.nseg_row % self.nest_div == 0 else 1,
                             self.nest_div if self.nseg_col % self.nest_div == 0 else 1)


def run_rng(seed: int, run: int) -> np.random.Generator:
    """Counter-based stream for one run, independent across run indices."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, run])))


def ar1_correlation(n: int, rho: float) -> np.ndarray:
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gen_ar_field(config: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``xi`` with ``cov(xi_lp) = s_s^2 rho_r^|du| rho_c^|dv|`` on the layout.

    Returned as an ``(n_rows, n_cols)`` array; ``xi = L_r W L_c'`` with
    standard normal ``W`` and Cholesky factors of the two AR(1) matrices.
    """
    if not (0 < config.rho_r < 1 and 0 < config.rho_c < 1):
        raise ValueError("autocorrelations must lie in (0, 1)")
    w = rng.standard_normal((config.n_rows, config.n_cols))
    if config.sigma2_s == 0:
        return np.zeros_like(w)
    lr = np.linalg.cholesky(ar1_correlation(config.n_rows, config.rho_r))
    lc = np.linalg.cholesky(ar1_correlation(config.n_cols, config.rho_c))
    return math.sqrt(config.sigma2_s) * (lr @ w @ lc.T)


def gen_design(m_g: int, r: int, block_size: int, layout: tuple[int, int],
               rng: np.random.Generator) -> np.ndarray:
    """Resolvable randomized assignment of genotypes ``0..m_g-1`` to plots.

    Plots are taken in column-major order and cut into ``r`` contiguous
    replicates, each holding every genotype once; consecutive runs of
    ``block_size`` plots inside a replicate form the incomplete blocks.
    Plots left over are fillers (``-1``).  Returns an ``(n_rows, n_cols)``
    integer array.
    """
    n_rows, n_cols = layout
    plots = n_rows * n_cols
    if m_g < 1 or r < 1 or block_size < 1:
        raise ValueError("genotype count, replicates and block size must be positive")
    per_rep = plots // r
    if m_g > per_rep:
        raise ValueError(f"{m_g} genotypes x {r} replicates exceed {plots} plots")
    if block_size > per_rep:
        raise ValueError(f"block size {block_size} exceeds the replicate size {per_rep}")
    seq = np.full(plots, -1, dtype=int)
    for k in range(r):
        rep = np.concatenate([np.arange(m_g), np.full(per_rep - m_g, -1)])
        seq[k * per_rep:(k + 1) * per_rep] = rng.permutation(rep)
    return seq.reshape(n_cols, n_rows).T


@dataclass(frozen=True)
class SimulatedTrial:
    data: TrialData
    genetic: np.ndarray
    labels: tuple


def simulate_trial(config: SimulationConfig, rng: np.random.Generator) -> SimulatedTrial:
    """``y = Z_g c_g + xi + e`` on one randomized layout."""
    assign = gen_design(config.m_g, config.replicates, config.block_size,
                        (config.n_rows, config.n_cols), rng)
    c_g = math.sqrt(config.sigma2_g) * rng.standard_normal(config.m_g)
    xi = gen_ar_field(config, rng)
    eps = math.sqrt(config.sigma2) * rng.standard_normal((config.n_rows, config.n_cols))
    g = np.where(assign >= 0, c_g[np.maximum(assign, 0)], 0.0)
    y = (g + xi + eps).ravel()
    rows, cols = np.meshgrid(np.arange(1, config.n_rows + 1), np.arange(1, config.n_cols + 1),
                             indexing="ij")
    width = len(str(config.m_g - 1))
    labels = tuple(f"G{i:0{width}d}" for i in range(config.m_g))
    gen = [labels[a] if a >= 0 else FILLER for a in assign.ravel()]
    return SimulatedTrial(TrialData.from_arrays(y, gen, rows.ravel(), cols.ravel()), c_g, labels)


@dataclass(frozen=True)
class RunRecord:
    run: int
    variant: str
    converged: bool
    log10_rmse: float
    sigma2_g_hat: float
    sigma2_hat: float
    ed_s: float
    iterations: int
    error: str = ""


def _fit_spats(config: SimulationConfig, trial: SimulatedTrial, run: int) -> RunRecord:
    checks = (FILLER,) if FILLER in trial.data.genotypes else ()
    spec = ModelSpec("random", checks=checks, spatial=config.spatial_config())
    opts = FitOptions(tolerance=config.tolerance, max_iter=config.max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = fit(build_system(trial.data, spec), opts)
    k = model.design.block_index(spec.genotype_name)
    est = dict(zip(model.assembled.labels.genotype_levels, model.result.c[k]))
    c_hat = np.array([est[lab] for lab in trial.labels])
    rmse = math.sqrt(float(np.mean((c_hat - trial.genetic) ** 2)))
    return RunRecord(run, "spats", model.converged, math.log10(rmse), float(model.variances[k]),
                     model.sigma2, spatial_ed(model), model.iterations)


def _fit_oracle(config: SimulationConfig, trial: SimulatedTrial, run: int) -> RunRecord:
    d = trial.data
    index = {lab: j for j, lab in enumerate(trial.labels)}
    z = np.zeros((len(d), config.m_g))
    x = [np.ones(len(d))]
    filler = np.zeros(len(d))
    for i, g in enumerate(d.genotypes):
        if g == FILLER:
            filler[i] = 1.0
        else:
            z[i, index[g]] = 1.0
    if filler.any():
        x.append(filler)
    x = np.column_stack(x)
    sigma = np.kron(ar1_correlation(config.n_rows, config.rho_r),
                    ar1_correlation(config.n_cols, config.rho_c))
    v = config.sigma2_g * z @ z.T + config.sigma2_s * sigma + config.sigma2 * np.eye(len(d))
    cf = scipy.linalg.cho_factor(v)
    vx = scipy.linalg.cho_solve(cf, x)
    y = d.response
    beta = np.linalg.solve(x.T @ vx, vx.T @ y)
    c_hat = config.sigma2_g * z.T @ scipy.linalg.cho_solve(cf, y - x @ beta)
    rmse = math.sqrt(float(np.mean((c_hat - trial.genetic) ** 2)))
    return RunRecord(run, "oracle", True, math.log10(rmse), config.sigma2_g, config.sigma2,
                     float("nan"), 0)


_FITTERS = {"spats": _fit_spats, "oracle": _fit_oracle}


def simulate_run(config: SimulationConfig, run: int) -> list[RunRecord]:
    """Simulate one data set and fit every requested variant."""
    trial = simulate_trial(config, run_rng(config.seed, run))
    out = []
    for variant in config.variants:
        try:
            out.append(_FITTERS[variant](config, trial, run))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
            nan = float("nan")
            out.append(RunRecord(run, variant, False, nan, nan, nan, nan, 0,
                                 f"{type(exc).__name__}: {exc}"))
    return out


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.sort(np.asarray(values, dtype=float))
        if v.size == 0 or np.all(np.isnan(v)):
            return cls(float("nan"), float("nan"))
        return cls(float(np.mean(v)), float(np.std(v, ddof=1)) if v.size > 1 else 0.0)


@dataclass(frozen=True)
class VariantSummary:
    variant: str
    n_runs: int
    n_used: int
    convergence_rate: float
    log10_rmse: Summary
    bias_sigma2_g: Summary
    bias_sigma2: Summary
    ed_s: Summary


@dataclass(frozen=True)
class SimulationReport:
    config: SimulationConfig
    variants: tuple
    runs: tuple = field(repr=False)

    def variant(self, name: str) -> VariantSummary:
        for v in self.variants:
            if v.variant == name:
                return v
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "variants": [asdict(v) for v in self.variants],
            "runs": [asdict(r) for r in self.runs],
        }


def _aggregate(config: SimulationConfig, records: list[RunRecord]) -> SimulationReport:
    # the summaries use runs where every variant converged
    by_run: dict[int, list[RunRecord]] = {}
    for r in records:
        by_run.setdefault(r.run, []).append(r)
    good = sorted(run for run, rs in by_run.items() if all(r.converged and not r.error for r in rs))
    if not good:
        raise RuntimeError("no simulation run converged for all variants")
    summaries = []
    for variant in config.variants:
        rs = [r for r in records if r.variant == variant]
        used = sorted((r for r in rs if r.run in set(good)), key=lambda r: r.run)
        summaries.append(VariantSummary(
            variant, len(rs), len(used),
            100.0 * sum(r.converged and not r.error for r in rs) / len(rs),
            Summary.of([r.log10_rmse for r in used]),
            Summary.of([r.sigma2_g_hat - config.sigma2_g for r in used]),
            Summary.of([r.sigma2_hat - config.sigma2 for r in used]),
            Summary.of([r.ed_s for r in used]),
        ))
    runs = tuple(sorted(records, key=lambda r: (r.run, config.variants.index(r.variant))))
    return SimulationReport(config, tuple(summaries), runs)


def run_study(config: SimulationConfig, threads: int = 1,
              progress: Optional[Callable[[RunRecord], None]] = None) -> SimulationReport:
    """Simulate ``config.n_runs`` trials, fit each variant and aggregate.

    Runs use independent random streams, so the report does not depend on
    ``threads``.
    """
    if threads < 1:
        raise ValueError("threads must be at least 1")
    records: list[RunRecord] = []
    runs = range(config.n_runs)
    if threads == 1:
        results = map(lambda i: simulate_run(config, i), runs)
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(lambda i: simulate_run(config, i), runs)
    try:
        for rs in results:
            for r in rs:
                if progress is not None:
                    progress(r)
            records.extend(rs)
    finally:
        if threads > 1:
            pool.shutdown()
    return _aggregate(config, records)
