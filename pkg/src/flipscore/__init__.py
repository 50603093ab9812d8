"""Robust sign-flip score tests for generalized linear models."""

from .comparators import WaldResult, wald_test
from .errors import (
    BoundaryError,
    CollinearityError,
    ConfigurationError,
    ConvergenceError,
    DataError,
    DegenerateStatisticError,
    DomainError,
    FitError,
    FlipScoreError,
    RankDeficiencyError,
)
from .families import Family, mean_derivative, variance_function
from .glm import DesignData, NullFit, fit_null
from .multivariate import (
    CombineMatrix,
    combined_statistic,
    run_multivariate_test,
    standardized_score_vector,
)
from .rng import FlipPlan
from .score import (
    Projection,
    ScoreTestResult,
    build_projection,
    effective_score,
    flip_variance_fast,
    run_univariate_test,
    score_contributions,
    standardized_statistic,
)

__version__ = "0.1.0"
