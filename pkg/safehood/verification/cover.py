# safehood/verification/cover.py
from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from safehood.config import VerificationConfig
from safehood.errors import PreconditionError
from safehood.models.automaton import HybridAutomaton, InitialSet
from safehood.models.trajectory import HybridTrajectory, TerminalStatus
from safehood.verification.bisim import QuadraticBisimFunction
from safehood.verification.robust import (
    Criticality,
    CriticalityClass,
    Neighborhood,
    NeighborhoodKind,
    classify_trajectory,
    robust_neighborhood,
)
from safehood.verification.safe import SafeNeighborhoodSolver
from safehood.verification.simulate import simulate

logger = logging.getLogger(__name__)

FULL_COVERAGE_TOL = 1e-9


class Mode(str, enum.Enum):
    ROBUST = "robust"
    SAFE = "safe"


class Verdict(str, enum.Enum):
    VERIFIED_SAFE = "verified-safe"
    FALSIFIED = "falsified"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True, eq=False)
class Counterexample:
    trajectory: HybridTrajectory
    location: str
    entry_time: float
    entry_state: np.ndarray


@dataclass(frozen=True, eq=False)
class CoverageSample:
    state: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    neighborhood: Neighborhood
    criticality: CriticalityClass
    radii: tuple[float, ...]
    status: TerminalStatus
    covered: bool


@dataclass(eq=False)
class CoverageReport:
    mode: Mode
    verdict: Verdict
    covered_fraction: float
    samples: list[CoverageSample] = field(default_factory=list)
    counterexample: Counterexample | None = None
    simulations: int = 0
    wall_time: float = 0.0
    depth_reached: int = 0
    audit_failures: int = 0
    diagnostics: list[str] = field(default_factory=list)


# ---------- Falsification ----------

def falsify_check(
    H: HybridAutomaton,
    traj: HybridTrajectory,
    cfg: VerificationConfig,
) -> Counterexample | None:
    """The trajectory itself when it enters an unsafe polytope of its location."""
    if traj.status == TerminalStatus.UNSAFE_HIT:
        seg = traj.last_segment
        return Counterexample(traj, seg.location, seg.t_end, seg.end_state)
    for seg in traj.segments:
        for poly in H.unsafe_in(seg.location):
            if poly.is_empty:
                continue
            if poly.n_rows == 0:
                return Counterexample(traj, seg.location, seg.t0, seg.x0)
            worst = np.max(poly.residuals(seg.samples), axis=1)
            hits = np.flatnonzero(worst <= cfg.dist_tol)
            if hits.size:
                j = int(hits[0])
                return Counterexample(traj, seg.location, float(seg.sample_times[j]), seg.samples[j])
    return None


# ---------- Box subdivision ----------

@dataclass(frozen=True)
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    depth: int

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def corners(self) -> np.ndarray:
        return InitialSet("", self.lo, self.hi).corners()

    def measure(self, axes: np.ndarray) -> float:
        return float(np.prod((self.hi - self.lo)[axes])) if axes.size else 1.0

    def split(self, M: np.ndarray) -> tuple["_Box", "_Box"]:
        """Halve along the longest axis, lengths weighted by sqrt(M_ii)."""
        widths = (self.hi - self.lo) * np.sqrt(np.diag(M))
        k = int(np.argmax(widths))
        mid = 0.5 * (self.lo[k] + self.hi[k])
        left_hi = self.hi.copy()
        left_hi[k] = mid
        right_lo = self.lo.copy()
        right_lo[k] = mid
        return _Box(self.lo, left_hi, self.depth + 1), _Box(right_lo, self.hi, self.depth + 1)


@dataclass(frozen=True, eq=False)
class _Evaluation:
    box: _Box
    trajectory: HybridTrajectory
    neighborhood: Neighborhood
    criticality: CriticalityClass
    radii: tuple[float, ...]
    diagnostics: tuple[str, ...]


class CoverageDriver:
    def __init__(
        self,
        H: HybridAutomaton,
        metrics: dict[str, QuadraticBisimFunction],
        cfg: VerificationConfig,
        mode: Mode,
        threads: int = 1,
        seed: int = 0,
    ) -> None:
        self.H = H
        self.metrics = metrics
        self.cfg = cfg
        self.mode = Mode(mode)
        self.threads = max(1, threads)
        self.seed = seed
        self.solver = SafeNeighborhoodSolver(H, metrics, cfg)

    def evaluate(self, box: _Box) -> _Evaluation:
        H, cfg = self.H, self.cfg
        loc = H.initial.location
        metric = self.metrics[loc]
        x0 = box.center
        traj = simulate(H, loc, x0, 0.0, cfg.t_end, cfg)
        if traj.status != TerminalStatus.HORIZON_REACHED:
            nb = Neighborhood(loc, x0, 0.0, metric, NeighborhoodKind(self.mode.value))
            if traj.status == TerminalStatus.UNSAFE_HIT:
                return _Evaluation(
                    box, traj, nb, CriticalityClass(Criticality.UNSAFE_CRITICAL), (0.0,), traj.diagnostics
                )
            msg = (
                f"sample {np.round(x0, 9).tolist()} ends {traj.status.value} at "
                f"t={traj.last_segment.t_end:.9g}; its box stays uncovered"
            )
            logger.warning(msg)
            return _Evaluation(
                box, traj, nb, CriticalityClass(Criticality.ABNORMAL), (0.0,), (*traj.diagnostics, msg)
            )

        robust = robust_neighborhood(H, traj, self.metrics, cfg)
        criticality = classify_trajectory(traj, robust.neighborhoods, cfg)
        if self.mode == Mode.ROBUST:
            return _Evaluation(
                box, traj, robust.certificate, criticality, tuple(robust.radii), traj.diagnostics
            )
        result = self.solver.solve(loc, x0, 0.0, cfg.t_end)
        return _Evaluation(
            box, traj, result.neighborhood, criticality, tuple(result.radii), tuple(result.diagnostics)
        )

    def run(self) -> CoverageReport:
        H, cfg = self.H, self.cfg
        init = H.initial
        loc = H.location(init.location)
        for corner in init.corners():
            if not loc.invariant.contains(corner, cfg.dist_tol):
                raise PreconditionError(
                    f"initial set corner {corner.tolist()} is outside Inv({loc.id})"
                )
        metric = self.metrics[loc.id]
        axes = np.flatnonzero(init.hi > init.lo)
        root = _Box(init.lo, init.hi, 0)
        total = root.measure(axes)

        started = time.perf_counter()
        report = CoverageReport(mode=self.mode, verdict=Verdict.INCONCLUSIVE, covered_fraction=0.0)
        rng = np.random.default_rng(self.seed)
        covered = 0.0
        level = [root]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            while level:
                evaluations = list(pool.map(self.evaluate, level))
                report.simulations += len(evaluations)
                report.depth_reached = max(report.depth_reached, level[0].depth)
                nxt: list[_Box] = []
                for ev in evaluations:
                    for msg in ev.diagnostics:
                        if msg not in report.diagnostics:
                            report.diagnostics.append(msg)
                    ce = falsify_check(H, ev.trajectory, cfg)
                    if ce is not None:
                        report.counterexample = ce
                        report.verdict = Verdict.FALSIFIED
                        logger.info(
                            "falsified: trajectory from %s enters the unsafe set in %s at t=%.6g",
                            np.round(ev.box.center, 9).tolist(), ce.location, ce.entry_time,
                        )
                        report.samples.append(self._sample(ev, False))
                        report.covered_fraction = covered / total
                        report.wall_time = time.perf_counter() - started
                        return report

                    is_covered = ev.neighborhood.radius > 0.0 and metric.ball_contains_box(
                        ev.box.center, ev.box.corners(), ev.neighborhood.radius
                    )
                    report.samples.append(self._sample(ev, is_covered))
                    if is_covered:
                        covered += ev.box.measure(axes)
                        report.audit_failures += self._audit(ev, rng)
                    elif ev.box.depth < cfg.coverage_max_depth:
                        nxt.extend(ev.box.split(metric.M))
                level = nxt

        report.covered_fraction = min(1.0, covered / total)
        report.verdict = (
            Verdict.VERIFIED_SAFE
            if report.covered_fraction >= 1.0 - FULL_COVERAGE_TOL
            else Verdict.INCONCLUSIVE
        )
        if report.verdict == Verdict.VERIFIED_SAFE:
            report.covered_fraction = 1.0
        report.wall_time = time.perf_counter() - started
        logger.info(
            "%s coverage: %s, fraction %.6f after %d simulations",
            self.mode.value, report.verdict.value, report.covered_fraction, report.simulations,
        )
        return report

    def _sample(self, ev: _Evaluation, covered: bool) -> CoverageSample:
        return CoverageSample(
            state=ev.box.center,
            lo=ev.box.lo,
            hi=ev.box.hi,
            depth=ev.box.depth,
            neighborhood=ev.neighborhood,
            criticality=ev.criticality,
            radii=ev.radii,
            status=ev.trajectory.status,
            covered=covered,
        )

    def _audit(self, ev: _Evaluation, rng: np.random.Generator) -> int:
        n = self.cfg.audit_samples
        if n <= 0:
            return 0
        pts = rng.uniform(ev.box.lo, ev.box.hi, size=(n, ev.box.lo.size))
        nb = ev.neighborhood
        outside = int(np.sum(nb.metric.many(pts, nb.center) >= nb.radius))
        if outside:
            logger.warning("audit: %d of %d samples outside the ball at %s", outside, n, ev.box.center.tolist())
        return outside


def cover_initial_set(
    H: HybridAutomaton,
    mode: Mode | str,
    metrics: dict[str, QuadraticBisimFunction],
    cfg: VerificationConfig,
    threads: int = 1,
    seed: int = 0,
) -> CoverageReport:
    return CoverageDriver(H, metrics, cfg, Mode(mode), threads=threads, seed=seed).run()
