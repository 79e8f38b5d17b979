"""Schall-type REML iteration for the variance components."""
from __future__ import annotations

import dataclasses
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mixed import (
    MixedModelDesign,
    MixedModelSystem,
    SolveResult,
    component_traces,
    reml_deviance,
    residual_ed,
    solve,
)

# effective dimensions below this pin the variance to the floor
ED_ZERO = 1e-10


class ConvergenceWarning(UserWarning):
    pass


class SaturatedModelError(RuntimeError):
    """The residual effective dimension vanished; the model interpolates the data."""


@dataclass(frozen=True)
class FitOptions:
    tolerance: float = 1e-6
    max_iter: int = 1000
    variance_floor: float = 1e-10
    init_variances: Optional[Sequence[float]] = None
    init_sigma2: Optional[float] = None
    trace_level: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.trace_level not in (0, 1, 2):
            raise ValueError("trace_level must be 0, 1 or 2")


@dataclass(frozen=True)
class FittedModel:
    design: MixedModelDesign = field(repr=False)
    result: SolveResult = field(repr=False)
    sigma2: float
    variances: np.ndarray
    effective_dims: np.ndarray
    ed_residual: float
    deviance: float
    deviance_path: tuple
    converged: bool
    iterations: int
    options: FitOptions
    log: tuple = ()
    assembled: object = field(default=None, repr=False)

    @property
    def rank_x(self) -> int:
        return self.design.rank_x

    @property
    def total_ed(self) -> float:
        """``rank(X) + sum_k ED_k``, the trace of the hat matrix."""
        return self.rank_x + float(np.sum(self.effective_dims))

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.design.blocks)

    def variance_of(self, name: str) -> float:
        return float(self.variances[self.design.block_index(name)])

    def ed_of(self, name: str) -> float:
        return float(self.effective_dims[self.design.block_index(name)])

    def block_coefficients(self, name: str) -> np.ndarray:
        return self.result.c[self.design.block_index(name)]


def _unwrap(model_input):
    if isinstance(model_input, MixedModelDesign):
        return model_input, None
    return model_input.design, model_input


def _updates(system: MixedModelSystem, res: SolveResult, ed: np.ndarray, ed_res: float,
             floor: float) -> tuple[float, np.ndarray]:
    d = system.design
    if ed_res <= ED_ZERO:
        raise SaturatedModelError(
            f"residual effective dimension is {ed_res:.3g}; the model is saturated")
    sigma2 = max(float(res.residuals @ res.residuals) / ed_res, floor)
    new = np.empty(len(d.blocks))
    for k, (b, c) in enumerate(zip(d.blocks, res.c)):
        if ed[k] < ED_ZERO:
            new[k] = floor
        else:
            new[k] = max(float(np.sum(b.precision * c * c)) / ed[k], floor)
    return sigma2, new


def fit(model_input, options: FitOptions | None = None, *, stream=None) -> FittedModel:
    """Estimate all variance components by the Schall fixed-point iteration.

    Each iteration solves the mixed-model equations at the current
    variances, evaluates the effective dimensions, and replaces every
    variance by its weighted sum of squared BLUPs divided by its effective
    dimension (the residual variance by RSS / ED_residual).  Iteration stops
    once the REML deviance changes by less than ``options.tolerance``.
    """
    options = options or FitOptions()
    design, assembled = _unwrap(model_input)
    stream = stream or sys.stderr
    q = len(design.blocks)
    yvar = float(np.var(design.y, ddof=1)) if design.n > 1 else 1.0
    if not yvar > 0:
        yvar = 1.0
    floor = options.variance_floor * yvar

    sigma2 = float(options.init_sigma2) if options.init_sigma2 is not None else yvar
    if options.init_variances is not None:
        var = np.asarray(options.init_variances, dtype=float).copy()
        if var.size != q:
            raise ValueError(f"expected {q} initial variances, got {var.size}")
    else:
        var = np.full(q, sigma2)
    var = np.maximum(var, floor)
    sigma2 = max(sigma2, floor)

    path: list[float] = []
    log: list[str] = []
    best = None
    converged = False
    increases = 0
    it = 0
    for it in range(1, options.max_iter + 1):
        system = MixedModelSystem(design, sigma2, var)
        res = solve(system)
        dev = reml_deviance(system, res)
        ed = component_traces(system, res)
        ed_res = residual_ed(system, ed)
        if options.trace_level >= 1:
            _trace(stream, it, dev, ed, ed_res, system, options.trace_level)
        if best is None or dev < best[0]:
            best = (dev, system, res, ed, ed_res)
        if path and abs(dev - path[-1]) < options.tolerance:
            path.append(dev)
            converged = True
            best = (dev, system, res, ed, ed_res)
            break
        increases = increases + 1 if path and dev > path[-1] else 0
        path.append(dev)
        new_sigma2, new_var = _updates(system, res, ed, ed_res, floor)
        if increases >= 2:
            new_sigma2 = 0.5 * (sigma2 + new_sigma2)
            new_var = 0.5 * (var + new_var)
            log.append(f"iteration {it}: deviance rose twice in a row, step halved")
        sigma2, var = new_sigma2, new_var

    dev, system, res, ed, ed_res = best
    if not converged:
        warnings.warn(f"REML iteration did not converge in {options.max_iter} iterations",
                      ConvergenceWarning, stacklevel=2)
        log.append(f"no convergence after {options.max_iter} iterations")
    return FittedModel(design, res, system.sigma2, system.variances.copy(), ed, ed_res, dev,
                       tuple(path), converged, it, options, tuple(log), assembled)


def _trace(stream, it, dev, ed, ed_res, system, level):
    eds = " ".join(f"{e:8.3f}" for e in ed)
    print(f"iter {it:4d}  deviance {dev:.8f}  ED [{eds}]  ED_res {ed_res:.3f}", file=stream)
    if level >= 2:
        vs = " ".join(f"{v:.4e}" for v in system.variances)
        print(f"           sigma2 {system.sigma2:.6e}  variances [{vs}]", file=stream)


def fixed_variance_fit(model_input, sigma2: float, variances, options: FitOptions | None = None
                       ) -> FittedModel:
    """Solve at the given variances without any outer iterations."""
    design, assembled = _unwrap(model_input)
    system = MixedModelSystem(design, float(sigma2), np.asarray(variances, dtype=float))
    res = solve(system)
    dev = reml_deviance(system, res)
    ed = component_traces(system, res)
    return FittedModel(design, res, system.sigma2, system.variances.copy(), ed,
                       residual_ed(system, ed), dev, (dev,), True, 0,
                       options or FitOptions(), ("variances fixed by caller",), assembled)


def refit_with(model: FittedModel, *, options: FitOptions | None = None, y=None,
               sigma2: float | None = None, variances=None, fix_variances: bool = False,
               warm_start: bool = True) -> FittedModel:
    """Refit ``model`` with new options, response or starting/fixed variances.

    By default the iteration starts from the variances stored in ``model``.
    With ``fix_variances=True`` the solve is done once at ``sigma2`` and
    ``variances`` (zero outer iterations).
    """
    design = model.design if y is None else model.design.with_response(y)
    target = design if model.assembled is None else dataclasses.replace(model.assembled, design=design)
    if fix_variances:
        if sigma2 is None or variances is None:
            raise ValueError("fixing variances requires both sigma2 and variances")
        if np.size(variances) != len(design.blocks):
            raise ValueError("variances do not match the number of random blocks")
        return fixed_variance_fit(target, sigma2, variances, options or model.options)
    opts = options or model.options
    if variances is not None:
        if np.size(variances) != len(design.blocks):
            raise ValueError("variances do not match the number of random blocks")
        opts = dataclasses.replace(opts, init_variances=tuple(np.ravel(variances)))
    elif warm_start and opts.init_variances is None:
        opts = dataclasses.replace(opts, init_variances=tuple(model.variances))
    if sigma2 is not None:
        opts = dataclasses.replace(opts, init_sigma2=float(sigma2))
    elif warm_start and opts.init_sigma2 is None:
        opts = dataclasses.replace(opts, init_sigma2=model.sigma2)
    return fit(target, opts)
