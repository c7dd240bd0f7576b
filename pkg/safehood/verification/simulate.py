# safehood/verification/simulate.py
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from safehood.config import VerificationConfig
from safehood.errors import ModelError, PreconditionError
from safehood.models.automaton import EventDef, HybridAutomaton, Location
from safehood.models.trajectory import (
    AffineFlow,
    EventRecord,
    ExitRecord,
    HybridTrajectory,
    TerminalStatus,
    TrajectorySegment,
)

logger = logging.getLogger(__name__)


def flow(loc: Location, x0: np.ndarray, dt: float) -> np.ndarray:
    """Exact affine flow e^{A dt} x0 + int_0^dt e^{A(dt-s)} b ds."""
    if dt < 0:
        raise PreconditionError(f"flow needs dt >= 0, got {dt}")
    return AffineFlow(loc.A, loc.b).step(np.asarray(x0, dtype=float), dt)


def outward_flow_check(loc: Location, facet: int, x: np.ndarray) -> bool:
    """
    True iff the flow strictly leaves the invariant through the facet at x,
    i.e. x is in the outward boundary part of Inv(loc) on that facet.
    """
    normal = loc.invariant.H[facet]
    return bool(normal @ loc.vector_field(np.asarray(x, dtype=float)) > 0.0)


def extend_segment(seg: TrajectorySegment, tau: float) -> TrajectorySegment:
    """The same location's flow continued on [t_end, t_end + tau], invariant ignored."""
    if tau < 0:
        raise PreconditionError(f"extension length must be >= 0, got {tau}")
    return TrajectorySegment(
        location=seg.location,
        x0=seg.end_state,
        t0=seg.t_end,
        t_end=seg.t_end + tau,
        flow=seg.flow,
        grid_dt=seg.grid_dt,
        exit=None,
        check_invariant=False,
    )


@dataclass(frozen=True)
class _Crossing:
    time: float
    point: np.ndarray
    facets: tuple[int, ...]


def bisect_crossing(g, lo: float, hi: float, tol: float) -> float:
    """Smallest time (to tol) at which g turns positive; g(lo) <= 0 < g(hi)."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def _find_exit(
    loc: Location,
    seg: TrajectorySegment,
    cfg: VerificationConfig,
) -> _Crossing | None:
    inv = loc.invariant
    if inv.n_rows == 0:
        return None
    times = seg.sample_times
    if times.size < 2:
        return None
    R = inv.residuals(seg.samples)
    # a start point on (or numerically just past) the boundary counts as on it
    R[0] = np.minimum(R[0], 0.0)
    outside = np.any(R > 0.0, axis=1)
    if not outside.any():
        return None
    j = int(np.argmax(outside))
    lo, hi = times[j - 1], times[j]

    crossings: list[tuple[float, int]] = []
    for i in np.flatnonzero(R[j] > 0.0):
        row, rhs = inv.H[i], inv.h[i]

        def g(t: float, row=row, rhs=rhs) -> float:
            return float(row @ seg.state(t) - rhs)

        crossings.append((bisect_crossing(g, lo, hi, cfg.event_tol), int(i)))
    # earliest crossing; ties go to the lowest facet index
    crossings.sort()
    t_c = crossings[0][0]
    x_c = seg.state(t_c)
    xdot = loc.vector_field(x_c)
    on_facets = tuple(
        int(i)
        for i in range(inv.n_rows)
        if inv.H[i] @ x_c - inv.h[i] > -cfg.dist_tol and inv.H[i] @ xdot > -cfg.event_tol
    )
    return _Crossing(time=t_c, point=x_c, facets=on_facets or (crossings[0][1],))


def _find_unsafe_entry(
    H: HybridAutomaton,
    seg: TrajectorySegment,
    cfg: VerificationConfig,
) -> float | None:
    unsafe = [p for p in H.unsafe_in(seg.location) if not p.is_empty]
    if not unsafe:
        return None
    times = seg.sample_times
    X = seg.samples
    first: float | None = None
    for poly in unsafe:
        worst = np.max(poly.residuals(X), axis=1) if poly.n_rows else np.full(times.size, -1.0)
        hits = np.flatnonzero(worst <= cfg.dist_tol)
        if hits.size == 0:
            continue
        j = int(hits[0])
        if j == 0:
            t_hit = times[0]
        else:

            def g(t: float, poly=poly) -> float:
                return -(float(np.max(poly.residuals(seg.state(t)))) - cfg.dist_tol)

            t_hit = bisect_crossing(g, times[j - 1], times[j], cfg.event_tol)
        first = t_hit if first is None else min(first, t_hit)
    return first


def _select_event(
    H: HybridAutomaton,
    loc: Location,
    crossing: _Crossing,
    cfg: VerificationConfig,
    diagnostics: list[str],
) -> EventDef | None:
    candidates = [
        e
        for e in H.events_from(loc.id)
        if e.facet in crossing.facets and e.guard.contains_honoring_strict(crossing.point, cfg.dist_tol)
    ]
    if len(candidates) > 1:
        msg = (
            f"guards {[e.id for e in candidates]} all contain the crossing point "
            f"{np.round(crossing.point, 9).tolist()} at t={crossing.time:.9g}; using {candidates[0].id}"
        )
        logger.warning(msg)
        diagnostics.append(msg)
    return candidates[0] if candidates else None


def simulate(
    H: HybridAutomaton,
    loc0: str,
    x0: np.ndarray,
    t0: float,
    t_end: float,
    cfg: VerificationConfig,
) -> HybridTrajectory:
    """
    Event-driven simulation of the automaton from (loc0, x0) over [t0, t_end].
    """
    if not H.has_location(loc0):
        raise PreconditionError(f"unknown location {loc0!r}")
    if t_end < t0:
        raise PreconditionError(f"horizon end {t_end} before start {t0}")
    loc = H.location(loc0)
    x = np.asarray(x0, dtype=float)
    if not loc.invariant.contains(x, cfg.dist_tol):
        raise PreconditionError(f"initial state {x.tolist()} is outside Inv({loc0})")

    t = float(t0)
    segments: list[TrajectorySegment] = []
    events: list[EventRecord] = []
    diagnostics: list[str] = []
    status = TerminalStatus.HORIZON_REACHED

    while True:
        seg = TrajectorySegment(
            location=loc.id,
            x0=x,
            t0=t,
            t_end=float(t_end),
            flow=AffineFlow(loc.A, loc.b),
            grid_dt=cfg.time_grid_dt,
        )
        crossing = _find_exit(loc, seg, cfg)
        stop = crossing.time if crossing else float(t_end)
        hit = _find_unsafe_entry(H, seg.truncated(stop), cfg)
        if hit is not None:
            segments.append(seg.truncated(hit))
            status = TerminalStatus.UNSAFE_HIT
            break
        if crossing is None:
            segments.append(seg)
            break

        for facet in crossing.facets:
            rate = float(loc.invariant.H[facet] @ loc.vector_field(crossing.point))
            if abs(rate) <= cfg.event_tol:
                msg = f"grazing contact with facet {facet} of {loc.id} at t={crossing.time:.9g}"
                logger.warning(msg)
                diagnostics.append(msg)

        event = _select_event(H, loc, crossing, cfg, diagnostics)
        if event is None:
            segments.append(seg.truncated(crossing.time))
            msg = (
                f"state {np.round(crossing.point, 9).tolist()} leaves Inv({loc.id}) at "
                f"t={crossing.time:.9g} outside every guard"
            )
            logger.warning(msg)
            diagnostics.append(msg)
            status = TerminalStatus.BLOCKED
            break
        if len(events) >= cfg.max_events:
            segments.append(seg.truncated(crossing.time))
            msg = f"event count reached {cfg.max_events}; stopping"
            logger.warning(msg)
            diagnostics.append(msg)
            status = TerminalStatus.BLOCKED
            break

        reset_state = event.reset(crossing.point)
        target = H.location(event.target)
        if not target.invariant.contains(reset_state, cfg.dist_tol):
            raise ModelError(
                f"reset of event {event.id} maps {crossing.point.tolist()} to "
                f"{reset_state.tolist()}, outside Inv({target.id})",
                locus=f"events.{event.index}.reset",
            )
        exit_record = ExitRecord(event.index, event.id, crossing.point, crossing.time)
        segments.append(
            TrajectorySegment(
                location=loc.id,
                x0=x,
                t0=t,
                t_end=crossing.time,
                flow=seg.flow,
                grid_dt=cfg.time_grid_dt,
                exit=exit_record,
            )
        )
        events.append(
            EventRecord(
                event_index=event.index,
                event_id=event.id,
                source=loc.id,
                target=target.id,
                time=crossing.time,
                trigger_state=crossing.point,
                reset_state=reset_state,
            )
        )
        loc, x, t = target, reset_state, crossing.time

    return HybridTrajectory(
        initial_location=loc0,
        t0=float(t0),
        t_end=float(t_end),
        segments=tuple(segments),
        events=tuple(events),
        status=status,
        diagnostics=tuple(diagnostics),
    )
