"""Exception hierarchy shared by every stage of the pipeline."""


class BregmanLensError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BregmanLensError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ValidationError(BregmanLensError, ValueError):
    """An input violates a documented invariant."""


class ContractError(BregmanLensError, ValueError):
    """A precondition of an operation was not met by the caller."""


class NumericError(BregmanLensError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class CorruptionError(BregmanLensError):
    """A checkpoint or artifact file failed integrity checks."""


class ConfigurationError(BregmanLensError):
    """A run was configured inconsistently or upstream artifacts are missing."""


class TrainingError(BregmanLensError):
    """Training diverged (non-finite loss)."""


class DegenerateConceptError(ValidationError):
    """A concept direction has (numerically) zero norm."""
