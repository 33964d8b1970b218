"""Exception types shared across the package."""


class StormkanError(Exception):
    """Base class for all package errors."""


class ShapeError(StormkanError):
    """Operand extents are incompatible with an operation's contract."""


class NumericsError(StormkanError):
    """A checked-mode tape detected a non-finite value."""


class ConfigError(StormkanError):
    """Invalid or conflicting configuration."""


class DataError(StormkanError):
    """Corrupt, truncated or inconsistent data artifacts."""


class CheckpointError(StormkanError):
    """Checkpoint payload does not match the expected format or model."""


class ExportError(StormkanError):
    """Model cannot be lowered to a static graph."""


class GraphError(StormkanError):
    """Static graph payload failed validation."""


class TrainingError(StormkanError):
    """Training aborted (e.g. non-finite loss)."""
