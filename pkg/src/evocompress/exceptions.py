"""
Exception types raised by evocompress.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
everything else raised during a run -> 4.
"""

from typing import Optional


class EvoCompressError(Exception):
    """Base class for all evocompress errors."""


class ConfigError(EvoCompressError, ValueError):
    """Invalid run configuration or command-line input."""


class DataError(EvoCompressError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(EvoCompressError, ValueError):
    """Tensor shapes do not compose."""


class NumericError(EvoCompressError, ArithmeticError):
    """NaN or Inf appeared in an output, a loss term or a gradient."""

    def __init__(self, message: str, term: Optional[str] = None):
        if term is not None:
            message = f"{message} (term: {term})"
        super().__init__(message)
        self.term = term


class PipelineError(EvoCompressError):
    """Pipeline parse failure or stage execution failure."""

    def __init__(self, message: str, stage_index: Optional[int] = None, trace=None):
        super().__init__(message)
        self.stage_index = stage_index
        self.trace = list(trace) if trace is not None else []


class CheckpointError(EvoCompressError):
    """Checkpoint container is malformed or has an unsupported version."""


class RunStateError(EvoCompressError):
    """Run directory is missing, incomplete, or belongs to another config."""
