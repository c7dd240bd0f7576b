# safehood/verification/bisim.py
"""
Quadratic bisimulation functions phi(x, y) = sqrt((x - y)^T M (x - y)) and
the distance kernels the neighborhood algorithms are built from.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from safehood.config import VerificationConfig
from safehood.errors import BisimulationError
from safehood.models.automaton import HybridAutomaton, Polytope
from safehood.models.trajectory import TrajectorySegment
from safehood.verification.geometry import CarvedGuard, PolytopeProjector, PolytopeTarget, ResetBall

logger = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2  # 1 / phi
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2  # 1 / phi^2

# local minima refined per window query
_MAX_REFINED_BRACKETS = 4


# ---------- Construction ----------

def solve_lyapunov(A: np.ndarray, Q: np.ndarray | None = None) -> np.ndarray:
    """
    M solving A^T M + M A = -Q for Hurwitz A.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0.0):
        raise BisimulationError(
            "no quadratic bisimulation metric constructed; supply M manually "
            f"(A has eigenvalues {np.round(eig, 6).tolist()})"
        )
    M = solve_continuous_lyapunov(A.T, -Q)
    M = 0.5 * (M + M.T)
    residual = np.linalg.norm(A.T @ M + M @ A + Q, ord="fro")
    if residual > 1e-9 * max(1.0, np.linalg.norm(Q, ord="fro")):
        raise BisimulationError(f"Lyapunov residual {residual:.3e} too large")
    return M


def check_bisimulation(M: np.ndarray, A: np.ndarray, tol: float = 1e-9) -> bool:
    """True iff M is positive definite and lambda_max(A^T M + M A) <= tol."""
    M = np.asarray(M, dtype=float)
    A = np.asarray(A, dtype=float)
    if not np.allclose(M, M.T, atol=1e-12):
        return False
    if np.min(np.linalg.eigvalsh(M)) <= 0.0:
        return False
    return bool(np.max(np.linalg.eigvalsh(A.T @ M + M @ A)) <= tol)


def phi(M: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.sqrt(max(d @ M @ d, 0.0)))


class DistanceTarget(Protocol):
    @property
    def is_empty(self) -> bool: ...

    def distances(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True, eq=False)
class QuadraticBisimFunction:
    location: str
    M: np.ndarray
    # projectors keyed by polytope identity; polytopes are immutable
    _projectors: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> float:
        return phi(self.M, x, y)

    def many(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        D = np.atleast_2d(X) - y
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", D, self.M, D), 0.0))

    def projector(self, polytope: Polytope) -> PolytopeProjector:
        with self._lock:
            proj = self._projectors.get(id(polytope))
            if proj is None or proj.polytope is not polytope:
                proj = PolytopeProjector(self.M, polytope)
                self._projectors[id(polytope)] = proj
            return proj

    def target(self, polytope: Polytope) -> PolytopeTarget:
        return PolytopeTarget(self.M, polytope, self.projector(polytope))

    def carved(self, guard: Polytope, hole: ResetBall | None = None) -> CarvedGuard:
        return CarvedGuard(self.M, guard, hole, self.projector(guard))

    def ball_contains_box(self, center: np.ndarray, corners: np.ndarray, radius: float) -> bool:
        """Open-ball test: max over box corners of phi(center, corner) < radius."""
        return bool(np.max(self.many(corners, center)) < radius)


def build_metrics(H: HybridAutomaton, dist_tol: float = 1e-9) -> dict[str, QuadraticBisimFunction]:
    """
    One quadratic bisimulation function per location: the model's own M when
    given, else the Lyapunov solution for Q = I.
    """
    metrics: dict[str, QuadraticBisimFunction] = {}
    for loc in H.locations:
        if loc.metric is not None:
            M = 0.5 * (loc.metric + loc.metric.T)
            if not check_bisimulation(M, loc.A, dist_tol):
                raise BisimulationError(
                    f"supplied M for location {loc.id!r} is not a bisimulation function"
                )
        else:
            M = solve_lyapunov(loc.A)
        metrics[loc.id] = QuadraticBisimFunction(loc.id, M)
        logger.debug("metric for %s: %s", loc.id, np.round(M, 6).tolist())
    return metrics


# ---------- Distance kernels ----------

@dataclass(frozen=True)
class DistanceResult:
    value: float
    witness_time: float | None = None
    witness_point: np.ndarray | None = None

    @classmethod
    def infinite(cls) -> "DistanceResult":
        return cls(np.inf, None, None)

    def min(self, other: "DistanceResult") -> "DistanceResult":
        return other if other.value < self.value else self


def dist_point_to_polytope(M: np.ndarray, p: np.ndarray, P: Polytope) -> DistanceResult:
    target = PolytopeTarget(M, P)
    if target.is_empty:
        return DistanceResult.infinite()
    Y, d = target.distances(np.asarray(p, dtype=float)[None, :])
    return DistanceResult(float(d[0]), None, Y[0])


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float) -> tuple[float, float]:
    """
    Golden-section search.

    Given a function f with a single local minimum in [a, b], returns a
    sub-interval [c, d] that contains the minimum with d - c <= tol.
    """
    a, b = min(a, b), max(a, b)
    h = b - a
    if h <= tol:
        return a, b

    n = int(math.ceil(math.log(tol / h) / math.log(INV_PHI)))

    c = a + INV_PHI_SQUARE * h
    d = a + INV_PHI * h
    yc = f(c)
    yd = f(d)

    for _ in range(n - 1):
        if yc < yd:
            b = d
            d = c
            yd = yc
            h = INV_PHI * h
            c = a + INV_PHI_SQUARE * h
            yc = f(c)
        else:
            a = c
            c = d
            yc = yd
            h = INV_PHI * h
            d = a + INV_PHI * h
            yd = f(d)

    if yc < yd:
        return a, d
    return c, b


def as_target(target: Polytope | DistanceTarget, metric: QuadraticBisimFunction) -> DistanceTarget:
    if isinstance(target, Polytope):
        return metric.target(target)
    return target


def sample_distances(
    segment: TrajectorySegment,
    times: np.ndarray,
    target: DistanceTarget,
) -> tuple[np.ndarray, np.ndarray]:
    """(witnesses, distances) of the segment states at the given times."""
    if times.size == 0:
        return np.zeros((0, segment.x0.size)), np.zeros(0)
    if target.is_empty:
        return np.full((times.size, segment.x0.size), np.nan), np.full(times.size, np.inf)
    return target.distances(segment.states(times))


def min_dist_over_window(
    segment: TrajectorySegment,
    window: tuple[float, float],
    target: Polytope | DistanceTarget,
    metric: QuadraticBisimFunction,
    cfg: VerificationConfig,
) -> DistanceResult:
    """
    inf over t in window of the distance from the segment state to target:
    grid scan on the segment's time grid, then golden-section refinement of
    the most promising local minima down to event_tol.
    """
    lo, hi = window
    if hi < lo:
        return DistanceResult.infinite()
    tgt = as_target(target, metric)
    if tgt.is_empty:
        return DistanceResult.infinite()

    times = segment.times_in(lo, hi)
    Y, d = sample_distances(segment, times, tgt)
    k = int(np.argmin(d))
    best = DistanceResult(float(d[k]), float(times[k]), Y[k])
    if best.value == 0.0 or times.size < 2:
        return best

    def dist_at(t: float) -> float:
        return float(tgt.distances(segment.state(t)[None, :])[1][0])

    interior = np.flatnonzero(
        (d[1:-1] <= d[:-2]) & (d[1:-1] <= d[2:])
    ) + 1
    candidates = list(interior)
    if d[0] <= d[1]:
        candidates.append(0)
    if d[-1] <= d[-2]:
        candidates.append(times.size - 1)
    candidates.sort(key=lambda i: d[i])

    for i in candidates[:_MAX_REFINED_BRACKETS]:
        a = times[max(i - 1, 0)]
        b = times[min(i + 1, times.size - 1)]
        c, e = golden_section(dist_at, a, b, cfg.event_tol)
        t_star = 0.5 * (c + e)
        Yt, dt = tgt.distances(segment.state(t_star)[None, :])
        if dt[0] < best.value:
            best = DistanceResult(float(dt[0]), float(t_star), Yt[0])
    return best


def min_dist_over_windows(
    segment: TrajectorySegment,
    windows: Sequence[tuple[float, float]],
    target: Polytope | DistanceTarget,
    metric: QuadraticBisimFunction,
    cfg: VerificationConfig,
) -> DistanceResult:
    best = DistanceResult.infinite()
    tgt = as_target(target, metric)
    for window in windows:
        best = best.min(min_dist_over_window(segment, window, tgt, metric, cfg))
    return best


def carved_target(
    metric: QuadraticBisimFunction,
    guard: Polytope,
    hole: ResetBall | None = None,
) -> CarvedGuard:
    return metric.carved(guard, hole)
