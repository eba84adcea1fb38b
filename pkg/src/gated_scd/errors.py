"""Exception hierarchy for the change detection lab.

Every failure the package raises on purpose derives from ScdError, so the CLI
can map it to an exit code in one place (see pipeline.main).
"""


class ScdError(Exception):
    """Base class for all package errors."""


class ShapeError(ScdError):
    """Tensor shapes or channel widths do not fit together."""


class ParameterError(ScdError):
    """A scalar parameter is outside its valid range."""


class ContractError(ScdError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class EmptyReductionError(ScdError):
    """A mean or ratio was requested over zero contributing elements."""


class DataError(ScdError):
    """Label values or dataset layout are invalid."""


class FormatError(ScdError):
    """A file on disk does not match its declared format."""


class TrainingError(ScdError):
    """Training hit a numerical condition it cannot recover from."""
