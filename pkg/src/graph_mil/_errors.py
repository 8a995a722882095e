from __future__ import annotations

from enum import Enum


class GraphMilError(Exception):
    """
    Base class for every error raised by graph_mil.

    ``exit_code`` is the process exit status the command-line interface uses
    when the error escapes a command.
    """

    exit_code: int = 3


class GraphMilConfigError(GraphMilError):
    """Raised for unknown, duplicate, missing or ill-typed configuration keys."""

    exit_code = 1


class GraphMilDataError(GraphMilError):
    """Raised when input data (files, manifests, datasets) cannot be used."""

    exit_code = 2


class FormatErrorCode(str, Enum):
    BAD_MAGIC = "bad-magic"
    TRUNCATED = "truncated"
    VERSION_MISMATCH = "version-mismatch"
    CORRUPT = "corrupt"


class GraphMilFormatError(GraphMilDataError):
    """
    Raised when a binary artifact (slide, checkpoint, dictionary, graph sidecar)
    is malformed. ``code`` tells the failure modes apart.
    """

    def __init__(self, code: FormatErrorCode, message: str) -> None:
        super().__init__(f"[{code.value}] {message}")
        self.code = code


class GraphMilClusteringError(GraphMilDataError):
    """Raised when a clustering precondition fails (too few points, empty input)."""


class GraphMilGraphError(GraphMilDataError):
    """Raised when a slide cannot be turned into a graph."""


class GraphMilSynthError(GraphMilDataError):
    """Raised when a synthetic dataset configuration cannot be realized."""


class GraphMilInterventionError(GraphMilDataError):
    """Raised when a confounder dictionary does not belong to the given model."""


class GraphMilInvariantError(GraphMilError):
    """Raised when an internal contract is violated."""

    exit_code = 3


class GraphMilShapeError(GraphMilInvariantError):
    """Raised on matrix dimension mismatches."""


class GraphMilNonFiniteError(GraphMilInvariantError):
    """Raised when a matrix holds NaN or infinite entries."""
