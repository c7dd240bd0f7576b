# safehood/verification/safe.py
"""
Safe neighborhoods: balls of initial states whose trajectories stay out of
the unsafe set, possibly by taking other events than the nominal trajectory.

Wherever the nominal trajectory passes within d_thr of a guard, a pivot is
placed at the closest approach and a branch trajectory is simulated through
that guard (a virtual event). The branch's own safe neighborhood, pulled
back through the reset, is the allowed part of the guard inside the pivot's
time window. The triggered guard is handled by the same mechanism: its
branch is the nominal continuation.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from safehood.config import VerificationConfig
from safehood.errors import PreconditionError, SafehoodError
from safehood.models.automaton import EventDef, HybridAutomaton, Polytope
from safehood.models.trajectory import HybridTrajectory, TerminalStatus, TrajectorySegment
from safehood.verification.bisim import (
    DistanceResult,
    QuadraticBisimFunction,
    golden_section,
    min_dist_over_window,
    min_dist_over_windows,
    sample_distances,
)
from safehood.verification.geometry import ResetBall
from safehood.verification.robust import (
    Bottleneck,
    Neighborhood,
    NeighborhoodKind,
    assemble_avoided_set,
    robust_neighborhood,
    shrinking,
)
from safehood.verification.simulate import simulate

logger = logging.getLogger(__name__)

Interval = tuple[float, float]


# ---------- Interval helpers ----------

def _subtract(intervals: Sequence[Interval], removed: Sequence[Interval]) -> list[Interval]:
    """Set difference of closed intervals; touching endpoints are kept."""
    out = [iv for iv in intervals if iv[0] <= iv[1]]
    for r_lo, r_hi in removed:
        nxt: list[Interval] = []
        for lo, hi in out:
            if r_hi <= lo or r_lo >= hi:
                nxt.append((lo, hi))
                continue
            if lo < r_lo:
                nxt.append((lo, r_lo))
            if r_hi < hi:
                nxt.append((r_hi, hi))
        out = nxt
    return out


def _clip(intervals: Sequence[Interval], lo: float, hi: float) -> list[Interval]:
    return [(max(a, lo), min(b, hi)) for a, b in intervals if min(b, hi) >= max(a, lo)]


def _mask(times: np.ndarray, intervals: Sequence[Interval]) -> np.ndarray:
    m = np.zeros(times.shape, dtype=bool)
    for lo, hi in intervals:
        m |= (times >= lo) & (times <= hi)
    return m


# ---------- Proximity ----------

def proximal_guards(
    H: HybridAutomaton,
    segment: TrajectorySegment,
    tau: float,
    d: float,
    metric: QuadraticBisimFunction,
) -> list[EventDef]:
    """Events of the segment's location whose active guard is within d of the state at tau."""
    x = segment.state(tau)[None, :]
    active = H.active_guards
    close = []
    for event in H.events_from(segment.location):
        g_act = active[event.index]
        if g_act.is_empty:
            continue
        _, dist = metric.target(g_act).distances(x)
        if dist[0] <= d:
            close.append(event)
    return close


def proximal_state(
    segment: TrajectorySegment,
    tau: float,
    guard: Polytope,
    metric: QuadraticBisimFunction,
) -> np.ndarray:
    """
    The point of cl(guard) closest to the state at tau. M is positive
    definite, so the minimizer is unique and no tie-break is needed.
    """
    if guard.is_empty:
        raise PreconditionError("proximal state of an empty guard")
    Y, _ = metric.target(guard).distances(segment.state(tau)[None, :])
    return Y[0]


# ---------- Result types ----------

@dataclass(frozen=True, eq=False)
class Pivot:
    index: int
    t_pivot: float
    window: tuple[Interval, ...]
    tau_lead: float
    tau_lag: float
    guards: tuple[str, ...]
    proximal_states: dict[str, np.ndarray]
    branches: dict[str, "SafeNode"]
    distance: float
    # no admissible window: the full guards were avoided over the widest window
    fallback: bool = False


@dataclass(frozen=True, eq=False)
class SafeNode:
    """One SafeNeighborhood call: a simulated trajectory and its safe ball."""

    location: str
    x0: np.ndarray
    t0: float
    t_end: float
    depth: int
    neighborhood: Neighborhood
    trajectory: HybridTrajectory | None = None
    pivots: tuple[Pivot, ...] = ()
    triggered: "SafeNode | None" = None
    triggered_event: str | None = None
    own_radius: float = 0.0
    robust_radius: float = 0.0
    tau_lag: float = 0.0
    diagnostics: tuple[str, ...] = ()

    @property
    def segment(self) -> TrajectorySegment | None:
        if self.trajectory is None or not self.trajectory.segments:
            return None
        return self.trajectory.segments[0]

    def walk(self) -> Iterator["SafeNode"]:
        """Every node reachable from this one, each visited once."""
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            yield node
            if node.triggered is not None:
                stack.append(node.triggered)
            for pivot in node.pivots:
                stack.extend(pivot.branches.values())


@dataclass(frozen=True, eq=False)
class SafeResult:
    root: SafeNode

    @property
    def neighborhood(self) -> Neighborhood:
        return self.root.neighborhood

    @property
    def chain(self) -> list[SafeNode]:
        """Nodes along the triggered events, first location first."""
        out = []
        node: SafeNode | None = self.root
        while node is not None:
            out.append(node)
            node = node.triggered
        return out

    @property
    def radii(self) -> list[float]:
        """Per-location radii along the triggered events (d_min)."""
        return [node.neighborhood.radius for node in self.chain]

    @property
    def diagnostics(self) -> list[str]:
        seen: list[str] = []
        for node in self.root.walk():
            for msg in node.diagnostics:
                if msg not in seen:
                    seen.append(msg)
        return seen


# ---------- Solver ----------

class SafeNeighborhoodSolver:
    """
    Recursive safe-neighborhood computation with a cache of branch results
    keyed by (location, start state to 1e-9, time window, depth). The cache
    is shared between threads; identical keys always produce identical
    nodes, so whichever insert lands first is kept.
    """

    def __init__(
        self,
        H: HybridAutomaton,
        metrics: dict[str, QuadraticBisimFunction],
        cfg: VerificationConfig,
    ) -> None:
        self.H = H
        self.metrics = metrics
        self.cfg = cfg
        self._cache: dict[tuple, SafeNode] = {}
        self._lock = threading.Lock()

    def solve(self, loc_id: str, x0: np.ndarray, t0: float, t_end: float, depth: int = 0) -> SafeResult:
        return SafeResult(self.node(loc_id, x0, t0, t_end, depth))

    def node(self, loc_id: str, x0: np.ndarray, t0: float, t_end: float, depth: int) -> SafeNode:
        x0 = np.asarray(x0, dtype=float)
        key = (
            loc_id,
            tuple(np.round(x0 / 1e-9).astype(np.int64).tolist()),
            round(float(t0), 12),
            round(float(t_end), 12),
            depth,
        )
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        computed = self._compute(loc_id, x0, float(t0), float(t_end), depth)
        with self._lock:
            return self._cache.setdefault(key, computed)

    # ---------- Node computation ----------

    def _zero_node(
        self,
        loc_id: str,
        x0: np.ndarray,
        t0: float,
        t_end: float,
        depth: int,
        traj: HybridTrajectory | None,
        reason: str | None,
    ) -> SafeNode:
        diagnostics = (reason,) if reason else ()
        if reason:
            logger.warning(reason)
        return SafeNode(
            location=loc_id,
            x0=x0,
            t0=t0,
            t_end=t_end,
            depth=depth,
            neighborhood=Neighborhood(loc_id, x0, 0.0, self.metrics[loc_id], NeighborhoodKind.SAFE),
            trajectory=traj,
            diagnostics=diagnostics + (traj.diagnostics if traj else ()),
        )

    def _compute(self, loc_id: str, x0: np.ndarray, t0: float, t_end: float, depth: int) -> SafeNode:
        cfg = self.cfg
        if depth > cfg.max_recursion_depth:
            return self._zero_node(
                loc_id, x0, t0, t_end, depth, None,
                f"recursion depth {depth} exceeds {cfg.max_recursion_depth} at {loc_id}; radius set to 0",
            )
        try:
            traj = simulate(self.H, loc_id, x0, t0, t_end, cfg)
        except SafehoodError as exc:
            return self._zero_node(
                loc_id, x0, t0, t_end, depth, None,
                f"branch from {np.round(x0, 9).tolist()} in {loc_id} could not be simulated: {exc}",
            )
        if traj.status == TerminalStatus.UNSAFE_HIT:
            reason = None
            if depth > 0:
                reason = (
                    f"branch from {np.round(x0, 9).tolist()} in {loc_id} enters the unsafe set "
                    f"at t={traj.last_segment.t_end:.9g}"
                )
            return self._zero_node(loc_id, x0, t0, t_end, depth, traj, reason)
        if traj.status == TerminalStatus.BLOCKED:
            return self._zero_node(
                loc_id, x0, t0, t_end, depth, traj,
                f"trajectory from {np.round(x0, 9).tolist()} in {loc_id} is blocked; radius set to 0",
            )

        robust = robust_neighborhood(self.H, traj, self.metrics, cfg)
        if cfg.threshold <= 0.0:
            return self._robust_chain(traj, robust.neighborhoods, robust.tau_lag, depth)
        return self._pivot_node(traj, robust.certificate, depth)

    def _robust_chain(
        self,
        traj: HybridTrajectory,
        neighborhoods: Sequence[Neighborhood],
        lags: Sequence[float],
        depth: int,
    ) -> SafeNode:
        """Without proximal guards the safe ball is the robust ball, segment by segment."""
        node: SafeNode | None = None
        for i in reversed(range(len(traj.segments))):
            seg = traj.segments[i]
            nb = neighborhoods[i]
            node = SafeNode(
                location=seg.location,
                x0=seg.x0,
                t0=seg.t0,
                t_end=traj.t_end,
                depth=depth + i,
                neighborhood=Neighborhood(nb.location, nb.center, nb.radius, nb.metric, NeighborhoodKind.SAFE, nb.bottleneck),
                trajectory=traj if i == 0 else None,
                triggered=node,
                triggered_event=seg.exit.event_id if seg.exit else None,
                own_radius=nb.radius,
                robust_radius=nb.radius,
                tau_lag=lags[i],
                diagnostics=traj.diagnostics if i == 0 else (),
            )
        assert node is not None
        return node

    def _pivot_node(self, traj: HybridTrajectory, robust_nbhd: Neighborhood, depth: int) -> SafeNode:
        cfg = self.cfg
        H = self.H
        seg = traj.segments[0]
        loc = H.location(seg.location)
        metric = self.metrics[loc.id]
        span = (seg.t0, seg.t_end)
        avoided = assemble_avoided_set(H, loc.id)
        comps = avoided.distance_components(metric)
        diagnostics: list[str] = list(traj.diagnostics)

        best_u = DistanceResult.infinite()
        bottleneck: Bottleneck | None = None
        for comp in comps:
            if comp.kind != "unsafe":
                continue
            res = min_dist_over_window(seg, span, comp.target, metric, cfg)
            if res.value < best_u.value:
                best_u = res
                bottleneck = Bottleneck("unsafe", loc.id, comp.name, res.value, res.witness_time, res.witness_point)
        d_u = best_u.value
        d_prox = min(d_u, cfg.threshold)

        guard_comps = [c for c in comps if c.kind == "guard"]
        times = seg.sample_times
        if guard_comps:
            G = np.vstack([sample_distances(seg, times, c.target)[1] for c in guard_comps])
            g_min = G.min(axis=0)
        else:
            g_min = np.full(times.size, np.inf)
        proximal = g_min <= d_prox

        pivots: list[Pivot] = []
        windows: list[Interval] = []
        d_piv = np.inf
        piv_bottleneck: Bottleneck | None = None
        while proximal.any():
            if len(pivots) >= cfg.max_pivots:
                msg = f"pivot cap {cfg.max_pivots} reached in {loc.id}; remaining approaches use the full guards"
                logger.warning(msg)
                diagnostics.append(msg)
                break
            if pivots and d_piv <= float(g_min[proximal].min()):
                break
            idx = np.flatnonzero(proximal)
            vals = g_min[idx]
            j = int(idx[vals == vals.min()][-1])
            t_k = self._refine_pivot(seg, times, j, guard_comps)
            pivot, piv_bn = self._pivot(len(pivots) + 1, traj, t_k, d_prox, windows, depth)
            pivots.append(pivot)
            windows.extend(pivot.window)
            proximal &= ~_mask(times, pivot.window)
            proximal[j] = False
            if pivot.distance < d_piv:
                d_piv, piv_bottleneck = pivot.distance, piv_bn

        rest = _subtract([span], windows)
        d_g = DistanceResult.infinite()
        g_bottleneck: Bottleneck | None = None
        for comp in guard_comps:
            res = min_dist_over_windows(seg, rest, comp.target, metric, cfg)
            if res.value < d_g.value:
                d_g = res
                g_bottleneck = Bottleneck("guard", loc.id, comp.name, res.value, res.witness_time, res.witness_point)

        gamma = min(d_u, d_g.value, d_piv)
        if gamma == d_g.value and g_bottleneck is not None:
            bottleneck = g_bottleneck
        elif gamma == d_piv and piv_bottleneck is not None:
            bottleneck = piv_bottleneck
        gamma = cfg.radius_cap if not np.isfinite(gamma) else min(gamma, cfg.radius_cap)
        if gamma <= cfg.dist_tol:
            gamma = 0.0

        tau_lag = 0.0
        if seg.exit is not None:
            shrink = shrinking(gamma, seg, avoided, windows, metric, loc.invariant, cfg)
            if shrink.radius < gamma and shrink.bottleneck is not None:
                bottleneck = shrink.bottleneck
            gamma, tau_lag = shrink.radius, shrink.tau_lag

        own = gamma
        radius = max(own, robust_nbhd.radius)
        logger.debug(
            "safe node %s depth %d: own radius %.6g, robust radius %.6g, %d pivots",
            loc.id, depth, own, robust_nbhd.radius, len(pivots),
        )
        if robust_nbhd.radius > own:
            bottleneck = robust_nbhd.bottleneck

        triggered, triggered_event = self._triggered_branch(traj, pivots, depth)
        return SafeNode(
            location=loc.id,
            x0=seg.x0,
            t0=seg.t0,
            t_end=traj.t_end,
            depth=depth,
            neighborhood=Neighborhood(loc.id, seg.x0, radius, metric, NeighborhoodKind.SAFE, bottleneck),
            trajectory=traj,
            pivots=tuple(pivots),
            triggered=triggered,
            triggered_event=triggered_event,
            own_radius=own,
            robust_radius=robust_nbhd.radius,
            tau_lag=tau_lag,
            diagnostics=tuple(diagnostics),
        )

    def _refine_pivot(self, seg: TrajectorySegment, times: np.ndarray, j: int, guard_comps) -> float:
        """Closest approach near grid index j, refined by golden-section search."""
        if j == 0 or j == times.size - 1 or not guard_comps:
            return float(times[j])

        def dist(t: float) -> float:
            x = seg.state(t)[None, :]
            return min(float(c.target.distances(x)[1][0]) for c in guard_comps)

        a, b = golden_section(dist, times[j - 1], times[j + 1], self.cfg.event_tol)
        t_star = 0.5 * (a + b)
        return t_star if dist(t_star) <= dist(float(times[j])) else float(times[j])

    def _pivot(
        self,
        k: int,
        traj: HybridTrajectory,
        t_k: float,
        d_prox: float,
        prior: Sequence[Interval],
        depth: int,
    ) -> tuple[Pivot, Bottleneck | None]:
        cfg = self.cfg
        H = self.H
        seg = traj.segments[0]
        metric = self.metrics[seg.location]
        active = H.active_guards
        close = proximal_guards(H, seg, t_k, d_prox, metric)

        states: dict[str, np.ndarray] = {}
        branches: dict[str, SafeNode] = {}
        holes: dict[int, tuple[ResetBall, np.ndarray]] = {}
        for event in close:
            g_act = active[event.index]
            on_exit = (
                seg.exit is not None
                and seg.exit.event_index == event.index
                and abs(t_k - seg.t_end) <= cfg.event_tol
            )
            y = seg.exit.point if on_exit else proximal_state(seg, t_k, g_act, metric)
            child = self.node(event.target, event.reset(y), t_k, traj.t_end, depth + 1)
            states[event.id] = y
            branches[event.id] = child
            nb = child.neighborhood
            holes[event.index] = (ResetBall(event.reset, nb.center, nb.radius, nb.metric.M), y)

        found = self._window(seg, t_k, close, holes, metric)
        fallback = found is None
        lead, lag = (cfg.tau_maxlead, cfg.tau_maxlag) if fallback else found
        window = _subtract([(t_k - lead, t_k + lag)], prior)
        if fallback:
            logger.debug("pivot %d at t=%.6g in %s: no admissible window", k, t_k, seg.location)

        in_span = _clip(window, seg.t0, seg.t_end)
        best = DistanceResult.infinite()
        bottleneck = None
        for event in H.events_from(seg.location):
            g_act = active[event.index]
            if g_act.is_empty:
                continue
            hole = None if fallback or event.index not in holes else holes[event.index][0]
            res = min_dist_over_windows(seg, in_span, metric.carved(g_act, hole), metric, cfg)
            if res.value < best.value:
                best = res
                bottleneck = Bottleneck("guard", seg.location, event.id, res.value, res.witness_time, res.witness_point)

        pivot = Pivot(
            index=k,
            t_pivot=t_k,
            window=tuple(window),
            tau_lead=lead,
            tau_lag=lag,
            guards=tuple(e.id for e in close),
            proximal_states=states,
            branches=branches,
            distance=best.value,
            fallback=fallback,
        )
        return pivot, bottleneck

    def _window(
        self,
        seg: TrajectorySegment,
        t_k: float,
        close: Sequence[EventDef],
        holes: dict[int, tuple[ResetBall, np.ndarray]],
        metric: QuadraticBisimFunction,
    ) -> tuple[float, float] | None:
        """
        Widest (lead, lag) on the time grid such that every proximal state in
        the window lies within alpha times the pullback margin of its pivot
        state. None when no nondegenerate window exists.
        """
        cfg = self.cfg
        if not close:
            return None
        margins = {idx: ball.margin_in(metric.M) for idx, (ball, _) in holes.items()}
        if any(m <= 0.0 for m in margins.values()):
            return None
        active = self.H.active_guards

        def admissible(t: float) -> bool:
            if t < seg.t0 or t > seg.t_end:
                return True
            for event in close:
                _, y_k = holes[event.index]
                y_t = proximal_state(seg, t, active[event.index], metric)
                if metric(y_t, y_k) > cfg.alpha * margins[event.index]:
                    return False
            return True

        def widest(limit: float, sign: float) -> float:
            s = 0.0
            while s < limit:
                nxt = min(limit, s + cfg.time_grid_dt)
                if not admissible(t_k + sign * nxt):
                    break
                s = nxt
            return s

        lead = widest(cfg.tau_maxlead, -1.0)
        lag = widest(cfg.tau_maxlag, 1.0)
        if lead + lag <= 0.0:
            return None
        return lead, lag

    def _triggered_branch(
        self,
        traj: HybridTrajectory,
        pivots: Sequence[Pivot],
        depth: int,
    ) -> tuple[SafeNode | None, str | None]:
        seg = traj.segments[0]
        if seg.exit is None:
            return None, None
        event = self.H.events[seg.exit.event_index]
        for pivot in pivots:
            if event.id in pivot.branches and abs(pivot.t_pivot - seg.t_end) <= self.cfg.event_tol:
                return pivot.branches[event.id], event.id
        # the triggered guard was never proximal (d_u below every guard distance)
        return self.node(event.target, traj.events[0].reset_state, seg.t_end, traj.t_end, depth + 1), event.id


def safe_neighborhood(
    H: HybridAutomaton,
    loc: str,
    x0: np.ndarray,
    t0: float,
    t_end: float,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
    depth: int = 0,
    solver: SafeNeighborhoodSolver | None = None,
) -> SafeResult:
    if not H.has_location(loc):
        raise PreconditionError(f"unknown location {loc!r}")
    if not H.location(loc).invariant.contains(np.asarray(x0, dtype=float), cfg.dist_tol):
        raise PreconditionError(f"initial state {np.asarray(x0).tolist()} is outside Inv({loc})")
    solver = solver or SafeNeighborhoodSolver(H, metrics, cfg)
    return solver.solve(loc, x0, t0, t_end, depth)


# ---------- Single-guard case ----------

def safe_neighborhood_basic(
    H: HybridAutomaton,
    loc: str,
    x0: np.ndarray,
    t0: float,
    t_end: float,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
) -> SafeResult:
    """
    One location with a single guard and no unsafe set, leading into a
    location with no outgoing events. The trajectory's closest approach to
    the guard is the only pivot; the window around it uses the full
    tau_maxlead / tau_maxlag.
    """
    events = H.events_from(loc)
    if len(events) != 1 or H.unsafe_in(loc) or H.events_from(events[0].target):
        raise PreconditionError(
            f"location {loc!r} does not have the single-guard structure; use safe_neighborhood"
        )
    event = events[0]
    target = event.target
    metric = metrics[loc]
    traj = simulate(H, loc, x0, t0, t_end, cfg)
    seg = traj.segments[0]
    span = (seg.t0, seg.t_end)
    g_act = H.active_guards[event.index]
    full = metric.target(g_act)

    closest = min_dist_over_window(seg, span, full, metric, cfg)
    pivots: tuple[Pivot, ...] = ()
    if closest.value <= cfg.threshold and closest.witness_time is not None:
        t_star = closest.witness_time
        y_star = proximal_state(seg, t_star, g_act, metric)
        reset_state = event.reset(y_star)
        branch_diagnostics: tuple[str, ...] = ()
        try:
            branch_traj = simulate(H, target, reset_state, t_star, t_end, cfg)
        except SafehoodError as exc:
            branch_traj = None
            branch_nbhd = Neighborhood(target, reset_state, 0.0, metrics[target], NeighborhoodKind.SAFE)
            branch_diagnostics = (
                f"branch from {np.round(reset_state, 9).tolist()} in {target} could not be simulated: {exc}",
            )
            logger.warning(branch_diagnostics[0])
        else:
            branch_nbhd = _branch_ball(H, branch_traj, metrics, cfg)
            branch_diagnostics = branch_traj.diagnostics
        branch_node = SafeNode(
            location=target,
            x0=branch_nbhd.center,
            t0=t_star,
            t_end=t_end,
            depth=1,
            neighborhood=branch_nbhd,
            trajectory=branch_traj,
            own_radius=branch_nbhd.radius,
            robust_radius=branch_nbhd.radius,
            diagnostics=branch_diagnostics,
        )
        window = _clip([(t_star - cfg.tau_maxlead, t_star + cfg.tau_maxlag)], *span)
        hole = ResetBall(event.reset, branch_nbhd.center, branch_nbhd.radius, branch_nbhd.metric.M)
        inside = min_dist_over_windows(seg, window, metric.carved(g_act, hole), metric, cfg)
        outside = min_dist_over_windows(seg, _subtract([span], window), full, metric, cfg)
        gamma = min(inside.value, outside.value)
        pivots = (
            Pivot(
                index=1,
                t_pivot=t_star,
                window=tuple(window),
                tau_lead=cfg.tau_maxlead,
                tau_lag=cfg.tau_maxlag,
                guards=(event.id,),
                proximal_states={event.id: y_star},
                branches={event.id: branch_node},
                distance=inside.value,
            ),
        )
    else:
        gamma = closest.value
    gamma = cfg.radius_cap if not np.isfinite(gamma) else min(gamma, cfg.radius_cap)
    if gamma <= cfg.dist_tol:
        gamma = 0.0
    root = SafeNode(
        location=loc,
        x0=seg.x0,
        t0=t0,
        t_end=t_end,
        depth=0,
        neighborhood=Neighborhood(loc, seg.x0, gamma, metric, NeighborhoodKind.SAFE),
        trajectory=traj,
        pivots=pivots,
        own_radius=gamma,
        diagnostics=traj.diagnostics,
    )
    return SafeResult(root)


def _branch_ball(
    H: HybridAutomaton,
    traj: HybridTrajectory,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
) -> Neighborhood:
    seg = traj.segments[0]
    metric = metrics[seg.location]
    if traj.status != TerminalStatus.HORIZON_REACHED:
        return Neighborhood(seg.location, seg.x0, 0.0, metric, NeighborhoodKind.SAFE)
    nb = robust_neighborhood(H, traj, metrics, cfg).certificate
    return Neighborhood(nb.location, nb.center, nb.radius, nb.metric, NeighborhoodKind.SAFE, nb.bottleneck)


# ---------- Event tree ----------

@dataclass(eq=False)
class EventTreeEdge:
    event_id: str
    kind: str  # "triggered" | "virtual"
    trigger_state: np.ndarray
    time: float
    child: "EventTreeNode"


@dataclass(eq=False)
class EventTreeNode:
    location: str
    entry_state: np.ndarray
    entry_time: float
    segment: TrajectorySegment | None = None
    children: list[EventTreeEdge] = field(default_factory=list)

    def paths(self) -> list[tuple[str, ...]]:
        """Event sequences of all root-to-leaf paths."""
        if not self.children:
            return [()]
        out: list[tuple[str, ...]] = []
        for edge in self.children:
            out.extend((edge.event_id, *tail) for tail in edge.child.paths())
        return out

    def admits(self, sequence: Sequence[str]) -> bool:
        """True iff sequence is a prefix of some root-to-leaf path."""
        if not sequence:
            return True
        return any(
            edge.event_id == sequence[0] and edge.child.admits(sequence[1:])
            for edge in self.children
        )

    def size(self) -> int:
        return 1 + sum(edge.child.size() for edge in self.children)

    def to_dict(self) -> dict:
        return {
            "location": self.location,
            "entry_state": np.asarray(self.entry_state).tolist(),
            "entry_time": self.entry_time,
            "children": [
                {
                    "event": edge.event_id,
                    "kind": edge.kind,
                    "trigger_state": np.asarray(edge.trigger_state).tolist(),
                    "time": edge.time,
                    "child": edge.child.to_dict(),
                }
                for edge in self.children
            ],
        }


def build_event_tree(result: SafeResult) -> EventTreeNode:
    return _tree_node(result.root)


def _tree_node(node: SafeNode) -> EventTreeNode:
    tree = EventTreeNode(node.location, node.x0, node.t0, node.segment)
    seg = node.segment
    if node.triggered is not None:
        point = seg.exit.point if seg is not None and seg.exit is not None else node.triggered.x0
        time = seg.exit.time if seg is not None and seg.exit is not None else node.triggered.t0
        tree.children.append(
            EventTreeEdge(node.triggered_event or "", "triggered", point, time, _tree_node(node.triggered))
        )
    for pivot in node.pivots:
        for event_id, child in pivot.branches.items():
            if child is node.triggered:
                continue
            tree.children.append(
                EventTreeEdge(event_id, "virtual", pivot.proximal_states[event_id], pivot.t_pivot, _tree_node(child))
            )
    return tree


# ---------- Enlarged reachable set ----------

@dataclass(frozen=True, eq=False)
class Branch:
    parent: int  # index into EnlargedReach.trajectories
    event_id: str
    time: float
    point: np.ndarray
    trajectory: HybridTrajectory
    depth: int


@dataclass(frozen=True, eq=False)
class EnlargedReach:
    root: HybridTrajectory
    branches: tuple[Branch, ...] = ()

    @property
    def trajectories(self) -> list[HybridTrajectory]:
        return [self.root, *(b.trajectory for b in self.branches)]

    @property
    def reaches_unsafe(self) -> bool:
        return any(t.status == TerminalStatus.UNSAFE_HIT for t in self.trajectories)


def critical_states(
    H: HybridAutomaton,
    traj: HybridTrajectory,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
) -> list[tuple[EventDef, float, np.ndarray]]:
    """
    States where the trajectory touches the closure of a guard it does not
    trigger there: (event, time, point on the guard).
    """
    out = []
    active = H.active_guards
    for seg in traj.segments:
        metric = metrics[seg.location]
        for event in H.events_from(seg.location):
            g_act = active[event.index]
            if g_act.is_empty:
                continue
            hi = seg.t_end
            if seg.exit is not None and seg.exit.event_index == event.index:
                # the trigger point itself is not critical
                hi = seg.t_end - 10.0 * max(cfg.event_tol, cfg.time_grid_dt * 1e-3)
            if hi < seg.t0:
                continue
            res = min_dist_over_window(seg, (seg.t0, hi), metric.target(g_act), metric, cfg)
            if res.value <= cfg.dist_tol and res.witness_time is not None:
                out.append((event, res.witness_time, res.witness_point))
    return out


def enlarged_reach(
    H: HybridAutomaton,
    x0: np.ndarray,
    t0: float,
    t_end: float,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
    loc: str | None = None,
) -> EnlargedReach:
    loc = loc or H.initial.location
    root = simulate(H, loc, x0, t0, t_end, cfg)
    trajs = [root]
    branches: list[Branch] = []
    frontier = [(0, root, 0)]
    while frontier:
        parent, traj, depth = frontier.pop(0)
        if depth >= cfg.max_recursion_depth:
            continue
        for event, t_star, y in critical_states(H, traj, metrics, cfg):
            try:
                sub = simulate(H, event.target, event.reset(y), t_star, t_end, cfg)
            except SafehoodError as exc:
                logger.warning("branch through %s at t=%.6g not simulated: %s", event.id, t_star, exc)
                continue
            branches.append(Branch(parent, event.id, t_star, y, sub, depth + 1))
            trajs.append(sub)
            frontier.append((len(trajs) - 1, sub, depth + 1))
    return EnlargedReach(root=root, branches=tuple(branches))
