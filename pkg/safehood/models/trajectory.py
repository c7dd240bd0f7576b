# safehood/models/trajectory.py
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import expm


class AffineFlow:
    """
    Closed-form solution of x' = Ax + b through the augmented exponential
    expm([[A, b], [0, 0]] dt), which carries the offset integral with it.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray) -> None:
        n = A.shape[0]
        self.n = n
        self.aug = np.zeros((n + 1, n + 1))
        self.aug[:n, :n] = A
        self.aug[:n, n] = b

    def propagate(self, x0: np.ndarray, dts: np.ndarray) -> np.ndarray:
        """States after each delay in dts (shape (k,)), as a (k, n) array."""
        dts = np.atleast_1d(np.asarray(dts, dtype=float))
        if dts.size == 0:
            return np.zeros((0, self.n))
        mats = expm(dts[:, None, None] * self.aug)
        n = self.n
        return mats[:, :n, :n] @ x0 + mats[:, :n, n]

    def step(self, x0: np.ndarray, dt: float) -> np.ndarray:
        if dt == 0.0:
            return np.array(x0, dtype=float, copy=True)
        return self.propagate(x0, np.array([dt]))[0]


def grid_times(anchor: float, lo: float, hi: float, dt: float) -> np.ndarray:
    """
    Times anchor + k*dt inside [lo, hi], with both endpoints added. Anchoring
    the grid keeps sub-windows of one segment on the same sample points.
    """
    if hi < lo:
        return np.zeros(0)
    if hi == lo:
        return np.array([lo])
    k_lo = int(np.ceil((lo - anchor) / dt - 1e-9))
    k_hi = int(np.floor((hi - anchor) / dt + 1e-9))
    inner = anchor + dt * np.arange(k_lo, k_hi + 1)
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate([[lo], inner, [hi]])


@dataclass(frozen=True)
class ExitRecord:
    event_index: int
    event_id: str
    point: np.ndarray
    time: float


@dataclass(frozen=True)
class EventRecord:
    event_index: int
    event_id: str
    source: str
    target: str
    time: float
    trigger_state: np.ndarray
    reset_state: np.ndarray


class TerminalStatus(str, enum.Enum):
    HORIZON_REACHED = "horizon-reached"
    BLOCKED = "blocked"
    UNSAFE_HIT = "unsafe-hit"


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    location: str
    x0: np.ndarray
    t0: float
    t_end: float
    flow: AffineFlow
    grid_dt: float
    exit: ExitRecord | None = None
    # extensions past t_end may leave the invariant
    check_invariant: bool = True

    @property
    def duration(self) -> float:
        return self.t_end - self.t0

    def state(self, t: float) -> np.ndarray:
        return self.flow.step(self.x0, t - self.t0)

    def states(self, times: np.ndarray) -> np.ndarray:
        return self.flow.propagate(self.x0, np.asarray(times, dtype=float) - self.t0)

    def times_in(self, lo: float, hi: float) -> np.ndarray:
        return grid_times(self.t0, lo, hi, self.grid_dt)

    @cached_property
    def sample_times(self) -> np.ndarray:
        return self.times_in(self.t0, self.t_end)

    @cached_property
    def samples(self) -> np.ndarray:
        return self.states(self.sample_times)

    @property
    def end_state(self) -> np.ndarray:
        return self.state(self.t_end)

    def truncated(self, t_end: float) -> "TrajectorySegment":
        return replace(self, t_end=t_end, exit=None)


@dataclass(frozen=True, eq=False)
class HybridTrajectory:
    initial_location: str
    t0: float
    t_end: float
    segments: tuple[TrajectorySegment, ...]
    events: tuple[EventRecord, ...]
    status: TerminalStatus
    diagnostics: tuple[str, ...] = field(default=())

    @property
    def event_sequence(self) -> tuple[str, ...]:
        return tuple(e.event_id for e in self.events)

    @property
    def locations(self) -> tuple[str, ...]:
        return tuple(seg.location for seg in self.segments)

    @property
    def last_segment(self) -> TrajectorySegment:
        return self.segments[-1]
