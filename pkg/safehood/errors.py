# safehood/errors.py
from __future__ import annotations


class SafehoodError(Exception):
    """Base class for every error raised by the safehood package."""


class ModelError(SafehoodError):
    """
    Raised when a model document cannot be turned into a HybridAutomaton.

    `locus` points at the offending place, e.g. "line 12, column 5" for a
    syntax error or "locations.1.A" for a schema/dimension problem.
    """

    def __init__(self, message: str, locus: str | None = None) -> None:
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


class BisimulationError(SafehoodError):
    """No quadratic bisimulation function could be built for a location."""


class PreconditionError(SafehoodError):
    """An operation was called with inputs outside its domain."""


class ArtifactError(SafehoodError):
    """A run directory is missing or does not contain what is expected."""
