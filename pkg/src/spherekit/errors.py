"""Exception hierarchy shared across the toolkit.

Contract violations (bad shapes, bad configs, protocol misuse) and numerical
failures (non-finite values, degenerate geometry) are kept in separate
branches so callers can map them to distinct exit codes.
"""

__all__ = [
    "ToolkitError",
    "ShapeError",
    "ConfigError",
    "FormatError",
    "SamplingError",
    "ProtocolError",
    "PoolingError",
    "NumericalError",
    "NormalizationError",
    "DegenerateBatchError",
    "TrainingError",
]


class ToolkitError(Exception):
    """Base class for every toolkit-specific failure."""


class ShapeError(ToolkitError):
    """Inputs have missing, incompatible, or invalid dimensions."""


class ConfigError(ToolkitError):
    """A run configuration fails schema or cross-field validation."""


class FormatError(ToolkitError):
    """A data file does not conform to its on-disk format."""


class SamplingError(ToolkitError):
    """The dataset cannot supply the requested batch or tuple."""


class ProtocolError(ToolkitError):
    """An evaluation-protocol constraint is violated."""


class PoolingError(ToolkitError):
    """A pooling operator received an empty token set."""


class NumericalError(ToolkitError):
    """A computation produced or received non-finite or degenerate values."""


class NormalizationError(NumericalError):
    """A vector with (near-)zero or non-finite norm cannot be projected onto the sphere."""


class DegenerateBatchError(NumericalError):
    """Two batch rows coincide, so the nearest-neighbor entropy term diverges.

    When raised from inside a training run, ``step`` carries the zero-based
    index of the aborting optimization step.
    """

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class TrainingError(NumericalError):
    """Training aborted on a non-finite loss or gradient.

    Carries the zero-based index of the failing optimization step.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step
