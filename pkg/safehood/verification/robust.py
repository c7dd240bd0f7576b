# safehood/verification/robust.py
"""
Robust neighborhoods: balls of initial states whose trajectories keep the
nominal event sequence and stay away from the unsafe set.

The computation runs from the last location reached back to the first. In
every location the trajectory has to keep away from an avoided set made of
the unsafe pieces and the active guards, except for the part of the
triggered guard that resets into the neighborhood already computed for the
next location.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog, minimize

from safehood.config import VerificationConfig
from safehood.errors import PreconditionError
from safehood.models.automaton import EventDef, HybridAutomaton, Polytope
from safehood.models.trajectory import HybridTrajectory, TerminalStatus, TrajectorySegment
from safehood.verification.bisim import (
    DistanceTarget,
    QuadraticBisimFunction,
    min_dist_over_window,
    sample_distances,
)
from safehood.verification.geometry import PolytopeProjector, ResetBall
from safehood.verification.simulate import bisect_crossing, extend_segment

logger = logging.getLogger(__name__)


class NeighborhoodKind(str, enum.Enum):
    ROBUST = "robust"
    SAFE = "safe"


class Criticality(str, enum.Enum):
    NONCRITICAL = "noncritical"
    GUARD_CRITICAL = "guard-critical"
    UNSAFE_CRITICAL = "unsafe-critical"
    # trajectory stopped before the horizon (blocked or event cap); no ball certified
    ABNORMAL = "abnormal-termination"


@dataclass(frozen=True)
class Bottleneck:
    """Which avoided component attained the minimum distance, and where."""

    kind: str  # "unsafe" | "guard"
    location: str
    component: str
    value: float
    time: float | None = None
    point: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "location": self.location,
            "component": self.component,
            "value": self.value,
            "time": self.time,
            "point": None if self.point is None else np.asarray(self.point).tolist(),
        }


@dataclass(frozen=True, eq=False)
class Neighborhood:
    location: str
    center: np.ndarray
    radius: float
    metric: QuadraticBisimFunction
    kind: NeighborhoodKind = NeighborhoodKind.ROBUST
    bottleneck: Bottleneck | None = None

    def contains(self, x: np.ndarray) -> bool:
        """Open ball: phi(center, x) < radius."""
        return self.metric(self.center, x) < self.radius

    def as_reset_ball(self, event: EventDef) -> ResetBall:
        return ResetBall(event.reset, self.center, self.radius, self.metric.M)


@dataclass(frozen=True)
class CriticalityClass:
    label: Criticality
    bottleneck: Bottleneck | None = None


# ---------- Avoided sets ----------

@dataclass(frozen=True, eq=False)
class AllowedPart:
    """
    {y in guard | phi'(r(y), c') < gamma'}: the guard points that reset into
    the next location's ball. `ball` is None when that set is empty.
    """

    event: EventDef
    guard: Polytope
    ball: ResetBall | None

    @property
    def is_empty(self) -> bool:
        return self.ball is None

    def contains(self, y: np.ndarray, tol: float = 0.0) -> bool:
        if self.ball is None:
            return False
        return self.guard.contains(y, tol) and self.ball.contains(y)


def _feasible_point(P: Polytope) -> np.ndarray:
    res = linprog(
        np.zeros(P.dim),
        A_ub=P.H,
        b_ub=P.h,
        bounds=[(None, None)] * P.dim,
        method="highs",
    )
    return np.asarray(res.x, dtype=float)


def reset_ball_gap(ball: ResetBall, guard: Polytope) -> float:
    """min over y in guard of phi'(r(y), center)."""
    if guard.is_empty:
        return np.inf
    R = ball.reset.R
    pulled = R.T @ ball.metric @ R
    if guard.n_rows == 0 and np.linalg.matrix_rank(R) == R.shape[1]:
        return 0.0
    if np.linalg.matrix_rank(R) == R.shape[1] == R.shape[0]:
        p = np.linalg.solve(R, ball.center - ball.reset.s)
        _, sq = PolytopeProjector(pulled, guard).project(p[None, :])
        return float(np.sqrt(sq[0]))

    # singular reset: the preimage is a cylinder, solve the small QP directly
    cons = {"type": "ineq", "fun": lambda y: guard.h - guard.H @ y, "jac": lambda y: -guard.H}
    res = minimize(
        lambda y: float(ball.values(y)[0] ** 2),
        _feasible_point(guard),
        constraints=[cons],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    return float(ball.values(res.x)[0])


def allowed_guard_part(
    event: EventDef,
    next_nbhd: Neighborhood,
    guard: Polytope | None = None,
) -> AllowedPart:
    """
    Preimage of the next neighborhood under the event's reset, cut to the
    guard. `guard` defaults to the event's full guard.
    """
    guard = event.guard if guard is None else guard
    if next_nbhd.radius <= 0.0:
        return AllowedPart(event, guard, None)
    ball = next_nbhd.as_reset_ball(event)
    if reset_ball_gap(ball, guard) >= ball.radius:
        return AllowedPart(event, guard, None)
    return AllowedPart(event, guard, ball)


@dataclass(frozen=True)
class AvoidedComponent:
    kind: str  # "unsafe" | "guard"
    name: str
    target: DistanceTarget


@dataclass(frozen=True, eq=False)
class AvoidedSet:
    location: str
    unsafe: tuple[Polytope, ...]
    guards: tuple[tuple[EventDef, Polytope], ...]
    allowed: tuple[AllowedPart, ...] = ()

    @property
    def components(self) -> list[Polytope]:
        return [*self.unsafe, *(g for _, g in self.guards)]

    @property
    def is_empty(self) -> bool:
        return not self.unsafe and not self.guards

    def distance_components(self, metric: QuadraticBisimFunction) -> list[AvoidedComponent]:
        holes = {part.event.index: part for part in self.allowed if not part.is_empty}
        out: list[AvoidedComponent] = [
            AvoidedComponent("unsafe", f"unsafe[{j}]", metric.target(poly))
            for j, poly in enumerate(self.unsafe)
        ]
        for event, g_act in self.guards:
            part = holes.get(event.index)
            out.append(
                AvoidedComponent("guard", event.id, metric.carved(g_act, part.ball if part else None))
            )
        return out


def assemble_avoided_set(
    H: HybridAutomaton,
    loc_id: str,
    allowed: Sequence[AllowedPart] = (),
) -> AvoidedSet:
    active = H.active_guards
    guards = tuple(
        (event, active[event.index])
        for event in H.events_from(loc_id)
        if not active[event.index].is_empty
    )
    unsafe = tuple(p for p in H.unsafe_in(loc_id) if not p.is_empty)
    return AvoidedSet(location=loc_id, unsafe=unsafe, guards=guards, allowed=tuple(allowed))


# ---------- Radius ----------

def robust_radius_raw(
    segment: TrajectorySegment,
    avoided: AvoidedSet,
    metric: QuadraticBisimFunction,
    cfg: VerificationConfig,
) -> tuple[float, Bottleneck | None]:
    """
    gamma_a = min over avoided components of the smallest distance reached by
    the segment. Values within dist_tol of zero count as zero.
    """
    best: Bottleneck | None = None
    for comp in avoided.distance_components(metric):
        res = min_dist_over_window(segment, (segment.t0, segment.t_end), comp.target, metric, cfg)
        if best is None or res.value < best.value:
            best = Bottleneck(
                kind=comp.kind,
                location=segment.location,
                component=comp.name,
                value=res.value,
                time=res.witness_time,
                point=res.witness_point,
            )
    if best is None or not np.isfinite(best.value):
        return cfg.radius_cap, best
    gamma = 0.0 if best.value <= cfg.dist_tol else min(best.value, cfg.radius_cap)
    return gamma, best


@dataclass(frozen=True)
class ShrinkResult:
    radius: float
    tau_lag: float
    gamma_tilde: float
    bottleneck: Bottleneck | None = None


def _in_windows(times: np.ndarray, windows: Sequence[tuple[float, float]]) -> np.ndarray:
    mask = np.zeros(times.shape, dtype=bool)
    for lo, hi in windows:
        mask |= (times >= lo) & (times <= hi)
    return mask


def shrinking(
    gamma: float,
    segment: TrajectorySegment,
    avoided: AvoidedSet,
    excluded_windows: Sequence[tuple[float, float]],
    metric: QuadraticBisimFunction,
    invariant: Polytope,
    cfg: VerificationConfig,
) -> ShrinkResult:
    """
    Radius reduction for trajectories that reach the guard up to tau_maxlag
    later than the nominal one. Along the flow continued past the event,
    gamma~(tau) is the running minimum of gamma and the avoided-set distances
    and d_inv(tau) the running maximum of the distance to the invariant. The
    lag is the first tau where d_inv catches up with gamma~ (tau_maxlag if
    it never does) and the new radius is d_inv there.
    """
    if gamma <= 0.0:
        return ShrinkResult(0.0, 0.0, 0.0)

    ext = extend_segment(segment, cfg.tau_maxlag)
    times = ext.sample_times
    comps = avoided.distance_components(metric)
    inv_target = metric.target(invariant)
    excluded = tuple(excluded_windows)

    def component_distances(ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        D = np.full((max(len(comps), 1), ts.size), np.inf)
        for row, comp in enumerate(comps):
            _, d = sample_distances(ext, ts, comp.target)
            if comp.kind == "guard" and excluded:
                d = np.where(_in_windows(ts, excluded), np.inf, d)
            D[row] = d
        return D.min(axis=0), D.argmin(axis=0)

    def inv_distances(ts: np.ndarray) -> np.ndarray:
        return sample_distances(ext, ts, inv_target)[1]

    d_avoid, arg = component_distances(times)
    g_tilde = np.minimum(gamma, np.minimum.accumulate(d_avoid))
    d_inv = np.maximum.accumulate(inv_distances(times))
    hit = g_tilde <= d_inv

    if not hit.any():
        t_lag = times[-1]
        radius = min(float(d_inv[-1]), float(g_tilde[-1]))
        gt = float(g_tilde[-1])
    elif hit[0]:
        t_lag = times[0]
        radius = min(float(d_inv[0]), float(g_tilde[0]))
        gt = float(g_tilde[0])
    else:
        j = int(np.argmax(hit))
        g_prev, inv_prev = float(g_tilde[j - 1]), float(d_inv[j - 1])

        def values_at(t: float) -> tuple[float, float]:
            ts = np.array([t])
            g = min(g_prev, float(component_distances(ts)[0][0]))
            return g, max(inv_prev, float(inv_distances(ts)[0]))

        def gap(t: float) -> float:
            g, di = values_at(t)
            return 1.0 if g <= di else -1.0

        t_lag = bisect_crossing(gap, times[j - 1], times[j], cfg.event_tol)
        gt, di = values_at(t_lag)
        radius = min(gt, di)

    bottleneck = None
    k = int(np.argmin(d_avoid))
    if comps and d_avoid[k] < gamma:
        comp = comps[int(arg[k])]
        bottleneck = Bottleneck(comp.kind, segment.location, comp.name, float(d_avoid[k]), float(times[k]))
    radius = 0.0 if radius <= cfg.dist_tol else min(radius, gamma)
    return ShrinkResult(radius=radius, tau_lag=float(t_lag - segment.t_end), gamma_tilde=gt, bottleneck=bottleneck)


# ---------- Recursion over the trajectory ----------

@dataclass(frozen=True, eq=False)
class RobustResult:
    trajectory: HybridTrajectory
    neighborhoods: tuple[Neighborhood, ...]
    tau_lag: tuple[float, ...]
    tau_maxlead: float
    avoided: tuple[AvoidedSet, ...] = field(default=(), repr=False)

    @property
    def radii(self) -> list[float]:
        """Per-segment radii, first location first (d_min)."""
        return [n.radius for n in self.neighborhoods]

    @property
    def certificate(self) -> Neighborhood:
        return self.neighborhoods[0]


def robust_neighborhood(
    H: HybridAutomaton,
    traj: HybridTrajectory,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
) -> RobustResult:
    if traj.status != TerminalStatus.HORIZON_REACHED:
        raise PreconditionError(
            f"robust neighborhoods need a trajectory that reaches the horizon, got {traj.status.value}"
        )
    n_seg = len(traj.segments)
    nbhds: list[Neighborhood | None] = [None] * n_seg
    lags = [0.0] * n_seg
    avoided_sets: list[AvoidedSet | None] = [None] * n_seg
    next_nbhd: Neighborhood | None = None

    for i in reversed(range(n_seg)):
        seg = traj.segments[i]
        loc = H.location(seg.location)
        metric = metrics[loc.id]

        allowed: list[AllowedPart] = []
        if seg.exit is not None and next_nbhd is not None:
            event = H.events[seg.exit.event_index]
            allowed.append(allowed_guard_part(event, next_nbhd, H.active_guards[event.index]))
        avoided = assemble_avoided_set(H, loc.id, allowed)

        gamma, bottleneck = robust_radius_raw(seg, avoided, metric, cfg)
        if seg.exit is not None:
            shrink = shrinking(gamma, seg, avoided, (), metric, loc.invariant, cfg)
            logger.debug(
                "segment %d in %s: gamma_a=%.6g shrunk to %.6g (tau_lag=%.4g)",
                i, loc.id, gamma, shrink.radius, shrink.tau_lag,
            )
            if shrink.radius < gamma and shrink.bottleneck is not None:
                bottleneck = shrink.bottleneck
            gamma = shrink.radius
            lags[i] = shrink.tau_lag
        else:
            logger.debug("segment %d in %s: gamma_a=%.6g", i, loc.id, gamma)

        nbhds[i] = Neighborhood(
            location=loc.id,
            center=seg.x0,
            radius=gamma,
            metric=metric,
            kind=NeighborhoodKind.ROBUST,
            bottleneck=bottleneck,
        )
        avoided_sets[i] = avoided
        next_nbhd = nbhds[i]

    return RobustResult(
        trajectory=traj,
        neighborhoods=tuple(nbhds),
        tau_lag=tuple(lags),
        tau_maxlead=cfg.tau_maxlead,
        avoided=tuple(avoided_sets),
    )


def classify_trajectory(
    traj: HybridTrajectory,
    neighborhoods: Sequence[Neighborhood],
    cfg: VerificationConfig,
) -> CriticalityClass:
    if traj.status == TerminalStatus.UNSAFE_HIT:
        return CriticalityClass(Criticality.UNSAFE_CRITICAL, None)
    zero = [n for n in neighborhoods if n.radius <= cfg.dist_tol]
    if not zero:
        smallest = min(neighborhoods, key=lambda n: n.radius, default=None)
        return CriticalityClass(Criticality.NONCRITICAL, smallest.bottleneck if smallest else None)
    for n in zero:
        if n.bottleneck is not None and n.bottleneck.kind == "unsafe":
            return CriticalityClass(Criticality.UNSAFE_CRITICAL, n.bottleneck)
    return CriticalityClass(Criticality.GUARD_CRITICAL, zero[0].bottleneck)
