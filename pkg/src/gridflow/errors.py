"""Exception types shared across the package."""


class GridFlowError(Exception):
    """Base class for errors raised by this package."""


class ParseError(GridFlowError, ValueError):
    """Malformed text input (grid files, configs). Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(GridFlowError, ValueError):
    """Well-formed input that violates a semantic requirement."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(GridFlowError, FloatingPointError):
    """Non-finite values or divisions past a safety floor."""


class ScheduleError(GridFlowError, ValueError):
    """Schedule unfit for the requested operation (e.g. not diffusion-compatible)."""


class CheckpointError(GridFlowError, RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""
