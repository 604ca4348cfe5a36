"""Gaussian additive models fitted by penalized least squares with REML smoothing."""

from .design import GamModel, ModelSpec, SmoothTerm, assemble_design, fit_gam, panel_spec, predict
from .fitting import FittedGam, fit_penalized_ls, optimize_reml, reml_gradient, reml_score
from .summary import SummaryTable, summarize

__all__ = [
    "FittedGam", "GamModel", "ModelSpec", "SmoothTerm", "SummaryTable", "assemble_design",
    "fit_gam", "fit_penalized_ls", "optimize_reml", "panel_spec", "predict", "reml_gradient",
    "reml_score", "summarize",
]
