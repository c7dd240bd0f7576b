# safehood/models/__init__.py
# The loader is not re-exported here: it imports safehood.verification,
# which itself imports these types.
from safehood.models.automaton import (
    AffineMap,
    EventDef,
    HybridAutomaton,
    InitialSet,
    Location,
    Polytope,
)
from safehood.models.trajectory import (
    EventRecord,
    ExitRecord,
    HybridTrajectory,
    TerminalStatus,
    TrajectorySegment,
)

__all__ = [
    "AffineMap",
    "EventDef",
    "HybridAutomaton",
    "InitialSet",
    "Location",
    "Polytope",
    "EventRecord",
    "ExitRecord",
    "HybridTrajectory",
    "TerminalStatus",
    "TrajectorySegment",
]
