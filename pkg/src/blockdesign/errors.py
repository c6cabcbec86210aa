"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation problems are
exit code 1, numerical infeasibility 2, and file/format problems 3.
"""


class BlockDesignError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(BlockDesignError):
    """Invalid user input: model/config/parameter specification errors."""


class InvalidBlockError(ValidationError):
    """A block is incompatible with the model (dimensions or bounds)."""


class InfeasibleError(BlockDesignError):
    """A numerically infeasible computation (singular matrices, overflow)."""


class SingularVError(InfeasibleError):
    """A marginal covariance matrix could not be formed or inverted."""

    def __init__(self, unit: int, detail: str = ""):
        self.unit = unit
        msg = f"singular marginal covariance at unit {unit}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class QuadratureError(BlockDesignError):
    """A quadrature rule was misused or an integrand returned non-finite values."""


class ExtrapolationError(BlockDesignError):
    """A surrogate was queried too far outside its training box."""


class BundleMismatchError(ValidationError):
    """A surrogate bundle does not match the model or parameters in use."""


class FileFormatError(BlockDesignError):
    """A persisted file is corrupt, unversioned, or of the wrong version."""
