from typing import List, Optional


class DenseBAError(Exception):
    """Base class for every error raised by dense_ba."""


class DegenerateInputError(DenseBAError, ValueError):
    """Input outside the domain of an operation (near-pi log, d <= 0, ...)."""


class IllConditionedSystemError(DenseBAError):
    """The reduced pose system could not be factorized."""

    def __init__(self, message: str, condition_number: float, size: int):
        super().__init__(
            f"{message} (condition number ~{condition_number:.3e}, size {size})"
        )
        self.condition_number = condition_number
        self.size = size


class DivergenceError(DenseBAError):
    """Cost grew beyond the allowed factor during an optimization phase."""

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


class SceneConfigError(DenseBAError, ValueError):
    """A synthetic scene cannot satisfy its configuration."""


class TrajectoryFormatError(DenseBAError, ValueError):
    """Malformed TUM trajectory file."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number


class TimestampOrderError(DenseBAError, ValueError):
    """Timestamps are not strictly increasing."""


class NoCovisibleKeyframeError(DenseBAError):
    """A non-keyframe shares no covisible keyframe."""


class AssociationError(DenseBAError, ValueError):
    """Too few timestamp pairs could be associated between trajectories."""
