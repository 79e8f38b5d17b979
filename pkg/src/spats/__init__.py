"""Spatial analysis of field trials with two-dimensional P-spline mixed models."""
from .assembly import (
    AssembledModel,
    ModelSpec,
    ModelSpecError,
    PlotRecord,
    PredictionGrid,
    TrialData,
    build_system,
    fit_trial,
    prediction_grid,
)
from .diagnostics import decompose_surface, ed_table, sample_variogram, variogram
from .genetics import genotype_predictions, heritability
from .mixed import CollinearityError, FactorizationError, MixedModelDesign, RandomBlock
from .psanova import SpatialConfig, build_psanova
from .reml import ConvergenceWarning, FitOptions, FittedModel, fit, refit_with

__version__ = "0.1.0"
