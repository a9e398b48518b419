"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes or landmark counts do not match."""


class SingularConfigurationError(ValueError):
    """Point configuration is degenerate (coincident points, zero spread)."""


class InsufficientDataError(ValueError):
    """Too few samples to train a model."""


class UnalignableError(RuntimeError):
    """Not enough detected landmarks to form or support a fit."""


class AlignmentFailure(RuntimeError):
    """Every mode of the ensemble failed to fit."""


class ContainerError(ValueError):
    """Base class for model container problems."""


class TruncatedContainerError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ParseError(ValueError):
    """Malformed annotation or box file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
