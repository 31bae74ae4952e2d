"""Exception hierarchy shared by the whole package."""

from __future__ import annotations


class CLDTrackError(Exception):
    """Base class for every error raised by cldtrack."""


class DegenerateInputError(CLDTrackError, ValueError):
    """Input is mathematically valid in type but degenerate (zero vector, empty list)."""


class DimensionMismatchError(CLDTrackError, ValueError):
    pass


class ServiceError(CLDTrackError):
    """Raised by a transport for a failure that will not go away on retry."""


class TransientServiceError(ServiceError):
    """Raised by a transport for a failure worth retrying (timeouts, rate limits)."""


class GenerationError(CLDTrackError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class BagConstructionError(CLDTrackError):
    def __init__(self, message: str, stage: str = "", best_similarity: float | None = None):
        super().__init__(message)
        self.stage = stage
        self.best_similarity = best_similarity


class BagFormatError(CLDTrackError):
    """Persisted container could not be read back."""


class ChecksumError(BagFormatError):
    pass


class VersionError(BagFormatError):
    pass


class SchemaError(BagFormatError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class TrainingDivergedError(CLDTrackError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


class SequenceFormatError(CLDTrackError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SessionError(CLDTrackError):
    pass


class ConfigError(CLDTrackError):
    pass
