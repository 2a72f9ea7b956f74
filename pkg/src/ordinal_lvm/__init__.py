"""Latent variable models for ordinal data fitted by EM.

Posterior expectations in the E-step can be approximated by the classical
Laplace method, the fully exponential Laplace approximation (FLA), plain
Gauss-Hermite quadrature, or two adaptive Gauss-Hermite variants.
"""

from .model import ItemParams, ModelParams, OrdinalDataset
from .integration import ApproximationMethod, QuadratureRule, gauss_hermite
from .em import FitConfig, FitResult, align_solution, fit
from .simulation import ScenarioSpec, StudyReport, generate, mardia, run_study

__all__ = [
    "ApproximationMethod",
    "FitConfig",
    "FitResult",
    "ItemParams",
    "ModelParams",
    "OrdinalDataset",
    "QuadratureRule",
    "ScenarioSpec",
    "StudyReport",
    "align_solution",
    "fit",
    "gauss_hermite",
    "generate",
    "mardia",
    "run_study",
]

__version__ = "0.1.0"
