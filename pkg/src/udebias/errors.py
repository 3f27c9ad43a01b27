"""Exception hierarchy shared by all udebias modules."""


class UDebiasError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UDebiasError, ValueError):
    """Invalid configuration or argument combination."""


class DataError(UDebiasError):
    """Malformed or unusable input data (ingestion, schema)."""


class InsufficientDataError(UDebiasError):
    """Too few observations for the requested operation."""


class InvalidFoldCountError(UDebiasError, ValueError):
    """Requested more folds than observations, or fewer than one."""


class FoldTrainingError(UDebiasError):
    """Nuisance training failed on one fold rectangle."""

    def __init__(self, fold_x: int, fold_u: int, cause: Exception):
        self.fold_x = fold_x
        self.fold_u = fold_u
        self.cause = cause
        super().__init__(
            f"nuisance training failed on fold ({fold_x}, {fold_u}): {cause!r}"
        )


class CoverageError(UDebiasError):
    """Some sample pairs have no evaluated kernel value."""

    def __init__(self, n_missing: int):
        self.n_missing = n_missing
        super().__init__(f"{n_missing} pair(s) have no evaluated kernel value")


class DegenerateVarianceError(UDebiasError):
    """Variance estimate is zero or negative; the kernel is degenerate."""


class DegenerateLabelsError(UDebiasError):
    """Classification labels contain a single class."""


class ConvergenceError(UDebiasError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        super().__init__(message)


class SingularityError(UDebiasError):
    """Rank-deficient linear system with no regularization."""


class ScoreError(UDebiasError):
    """A fitted score evaluated to a non-finite value."""


class NuisanceFitError(UDebiasError):
    """One component of a nuisance bundle failed to fit."""

    def __init__(self, component: str, cause: Exception):
        self.component = component
        self.cause = cause
        super().__init__(f"{component} fit failed: {cause!r}")
