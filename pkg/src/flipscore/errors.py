"""Exception hierarchy.

Every error raised on purpose by the library derives from
:class:`FlipScoreError` and carries an ``exit_code`` used by the CLI.
"""

from __future__ import annotations


class FlipScoreError(Exception):
    """Base class for library errors."""

    exit_code = 6
    category = "internal"


class ConfigurationError(FlipScoreError, ValueError):
    """Invalid test or scenario configuration (flip count, level, ...)."""

    exit_code = 2
    category = "usage"


class DataError(FlipScoreError, ValueError):
    """Malformed input data: shapes, non-finite values, missing columns."""

    exit_code = 3
    category = "data"


class DomainError(DataError):
    """A mean or linear predictor lies outside the family's valid range."""


class RankDeficiencyError(DataError):
    """The nuisance design (or the joint design) is not of full column rank."""


class CollinearityError(DataError):
    """A target column lies (numerically) in the span of the nuisance design."""


class FitError(FlipScoreError):
    """The GLM fit failed."""

    exit_code = 4
    category = "fit"


class ConvergenceError(FitError):
    """IRLS did not converge; ``last_iterate`` holds the final coefficients."""

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class BoundaryError(FitError):
    """Fitted means pinned at the edge of the mean range (e.g. separation)."""


class DegenerateStatisticError(FlipScoreError):
    """The test statistic (or its flip variance) is degenerate."""

    exit_code = 5
    category = "degenerate"
