from typing import List, NoReturn, Optional

import numpy as np

from pyegopose.modules.enums import ExitCode


class PoseError(Exception):
    """Base exception for every failure raised by PyEgoPose.

    >>> PoseError

    See Also:
        Each subclass carries the process exit code the command line interface terminates with.
    """

    exit_code: ExitCode = ExitCode.numeric

    def __init__(self, detail: Optional[str] = ""):
        """Instantiates the ``PoseError`` object.

        Args:
            detail: Human-readable reason for the failure.
        """
        super().__init__(detail)
        self.detail = detail


class ConfigError(PoseError):
    """Raised for invalid or inconsistent settings.

    >>> ConfigError

    """

    exit_code = ExitCode.config


class MissingArtifact(PoseError):
    """Raised when a dataset or checkpoint required by a command is absent.

    >>> MissingArtifact

    """

    exit_code = ExitCode.missing_artifact

    def __init__(self, missing: List[str]):
        """Instantiates the ``MissingArtifact`` object.

        Args:
            missing: Paths of every artifact that could not be found.
        """
        self.missing = missing
        super().__init__("Missing artifacts:\n\t" + "\n\t".join(missing))


class NumericFailure(PoseError):
    """Raised when a numerical routine cannot produce a valid result.

    >>> NumericFailure

    """

    exit_code = ExitCode.numeric


class ShapeError(NumericFailure):
    """Raised on mismatched array shapes, lengths or skeletons.

    >>> ShapeError

    """


class DegenerateRotation(NumericFailure):
    """Raised when a 6D rotation has a zero or parallel column.

    >>> DegenerateRotation

    """


class BehindCamera(NumericFailure):
    """Raised when projecting a point with non-positive depth.

    >>> BehindCamera

    """


class RankError(NumericFailure):
    """Raised when a joint configuration cannot constrain the wrist offset.

    >>> RankError

    """


class NonConvergence(NumericFailure):
    """Raised when the reprojection solver diverges.

    >>> NonConvergence

    """

    def __init__(self, detail: str, best_offset: np.ndarray, best_rms: float):
        """Instantiates the ``NonConvergence`` object.

        Args:
            detail: Reason for the failure.
            best_offset: Offset with the lowest residual seen before giving up.
            best_rms: RMS residual of ``best_offset`` in pixels.
        """
        super().__init__(detail)
        self.best_offset = best_offset
        self.best_rms = best_rms


class DomainError(NumericFailure):
    """Raised when an argument lies outside the domain of an operation.

    >>> DomainError

    """


class InconsistentPair(NumericFailure):
    """Raised when a diffusion state pair has zero forward probability.

    >>> InconsistentPair

    """


class ScheduleError(ConfigError):
    """Raised for transition schedules violating the probability constraints.

    >>> ScheduleError

    """


def raise_shape_error(name: str, expected, received) -> NoReturn:
    """Raises a ``ShapeError`` with a uniform message.

    Args:
        name: Name of the offending quantity.
        expected: Expected shape or length.
        received: Received shape or length.

    Raises:
        ShapeError: Always.
    """
    raise ShapeError(f"{name!r} expected {expected}, received {received}")
