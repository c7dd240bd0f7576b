# safehood/verification/geometry.py
"""
Small dense QP kernels behind every phi-distance query.

Distances are measured in a quadratic form M (symmetric positive definite):
dist_M(p, S) = min_{y in S} sqrt((p - y)^T M (p - y)).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from safehood.models.automaton import AffineMap, Polytope

logger = logging.getLogger(__name__)

# polytopes with more rows than this are projected with SLSQP instead of face enumeration
MAX_ENUMERATED_ROWS = 8
_FEAS_TOL = 1e-9


def _quad(M: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Row-wise d^T M d for D of shape (k, n)."""
    return np.einsum("ij,jk,ik->i", D, M, D)


class PolytopeProjector:
    """
    Exact minimizer of (p - y)^T M (p - y) over {Hy <= h}.

    Every face of the polytope is the solution set of some active subset of
    rows; projecting onto each face's affine hull and keeping the best
    feasible candidate gives the global minimum of the convex problem. The
    projection operators are built once and applied to whole batches of
    points. M is positive definite, so the minimizer is unique.
    """

    def __init__(self, M: np.ndarray, polytope: Polytope) -> None:
        self.M = np.asarray(M, dtype=float)
        self.polytope = polytope
        self.n = polytope.dim
        self._faces: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._fallback = False
        if polytope.is_empty or polytope.n_rows == 0:
            return
        if polytope.n_rows > MAX_ENUMERATED_ROWS:
            logger.debug("polytope with %d rows: using SLSQP projection", polytope.n_rows)
            self._fallback = True
            return

        eq_rows = [i for pair in polytope.equality_pairs for i in pair[:1]]
        paired = {i for pair in polytope.equality_pairs for i in pair}
        ineq_rows = [i for i in range(polytope.n_rows) if i not in paired]
        E = polytope.H[eq_rows]
        e = polytope.h[eq_rows]
        rank = int(np.linalg.matrix_rank(E)) if eq_rows else 0
        free = max(0, self.n - rank)

        M_inv = np.linalg.inv(self.M)
        for k in range(min(free, len(ineq_rows)) + 1):
            for subset in itertools.combinations(ineq_rows, k):
                A = np.vstack([E, polytope.H[list(subset)]]) if subset else E
                b = np.concatenate([e, polytope.h[list(subset)]]) if subset else e
                if A.shape[0] == 0:
                    self._faces.append((A, b, np.zeros((self.n, 0))))
                    continue
                gram = A @ M_inv @ A.T
                if np.linalg.cond(gram) > 1e12:
                    continue
                K = M_inv @ A.T @ np.linalg.inv(gram)
                self._faces.append((A, b, K))

    @property
    def is_empty(self) -> bool:
        return self.polytope.is_empty

    def project(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Returns (witnesses, squared distances) for the rows of P. Empty
        polytope gives +inf distances and NaN witnesses.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        k = P.shape[0]
        if self.polytope.is_empty:
            return np.full_like(P, np.nan), np.full(k, np.inf)
        if self.polytope.n_rows == 0:
            return P.copy(), np.zeros(k)
        if self._fallback:
            return self._project_slsqp(P)

        H, h = self.polytope.H, self.polytope.h
        slack = _FEAS_TOL * (1.0 + np.abs(h))
        best = np.full(k, np.inf)
        best_y = np.full_like(P, np.nan)
        for A, b, K in self._faces:
            if A.shape[0] == 0:
                Y = P
            else:
                Y = P - (P @ A.T - b) @ K.T
            feasible = np.all(Y @ H.T - h <= slack, axis=1)
            if not feasible.any():
                continue
            val = _quad(self.M, Y - P)
            better = feasible & (val < best)
            best[better] = val[better]
            best_y[better] = Y[better]

        missing = ~np.isfinite(best)
        if missing.any():
            y, v = self._project_slsqp(P[missing])
            best_y[missing] = y
            best[missing] = v
        return best_y, np.maximum(best, 0.0)

    def _project_slsqp(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        H, h, M = self.polytope.H, self.polytope.h, self.M
        ys = np.empty_like(P)
        vals = np.empty(P.shape[0])
        cons = {"type": "ineq", "fun": lambda y: h - H @ y, "jac": lambda y: -H}
        for row, p in enumerate(P):
            res = minimize(
                lambda y: float((y - p) @ M @ (y - p)),
                p,
                jac=lambda y: 2.0 * M @ (y - p),
                constraints=[cons],
                method="SLSQP",
                options={"ftol": 1e-14, "maxiter": 500},
            )
            ys[row] = res.x
            vals[row] = float((res.x - p) @ M @ (res.x - p))
        return ys, vals


@dataclass(frozen=True, eq=False)
class GuardChart:
    """
    Affine parameterization y = origin + basis @ u of a polytope's affine
    hull, with the remaining rows expressed in the chart coordinates u.
    """

    origin: np.ndarray
    basis: np.ndarray
    G: np.ndarray
    g: np.ndarray

    @classmethod
    def of(cls, polytope: Polytope) -> "GuardChart":
        pairs = polytope.equality_pairs
        eq_rows = [i for i, _ in pairs]
        paired = {i for pair in pairs for i in pair}
        n = polytope.dim
        if eq_rows:
            E = polytope.H[eq_rows]
            e = polytope.h[eq_rows]
            origin = np.linalg.lstsq(E, e, rcond=None)[0]
            basis = null_space(E)
        else:
            origin = np.zeros(n)
            basis = np.eye(n)
        rest = [i for i in range(polytope.n_rows) if i not in paired]
        G = polytope.H[rest] @ basis if rest else np.zeros((0, basis.shape[1]))
        g = polytope.h[rest] - polytope.H[rest] @ origin if rest else np.zeros(0)
        return cls(origin=origin, basis=basis, G=G, g=g)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def interval(self) -> tuple[float, float] | None:
        """Feasible range of the single chart coordinate (dim == 1 only)."""
        lo, hi = -np.inf, np.inf
        for a, c in zip(self.G[:, 0], self.g):
            if abs(a) < 1e-14:
                if c < -_FEAS_TOL:
                    return None
                continue
            bound = c / a
            if a > 0:
                hi = min(hi, bound)
            else:
                lo = max(lo, bound)
        if lo > hi + _FEAS_TOL:
            return None
        return lo, max(lo, hi)


@dataclass(frozen=True, eq=False)
class ResetBall:
    """
    {y | phi'(r(y), center) < radius}: the preimage of an open phi-ball of
    the target location under an affine reset r.
    """

    reset: AffineMap
    center: np.ndarray
    radius: float
    metric: np.ndarray

    def values(self, Y: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Y) @ self.reset.R.T + self.reset.s - self.center
        return np.sqrt(np.maximum(_quad(self.metric, Z), 0.0))

    def contains(self, y: np.ndarray) -> bool:
        return bool(self.values(y)[0] < self.radius)

    def margin_in(self, M_src: np.ndarray) -> float:
        """
        Largest rho with {y | phi_src(y, y_c) < rho} inside the preimage ball
        around any y_c that r maps onto the center.
        """
        if self.radius <= 0.0:
            return 0.0
        pulled = self.reset.R.T @ self.metric @ self.reset.R
        lam = float(np.max(np.linalg.eigvals(np.linalg.solve(M_src, pulled)).real))
        if lam <= 1e-15:
            return np.inf
        return self.radius / np.sqrt(lam)


class CarvedGuard:
    """
    A guard with an allowed part removed: {y in guard | phi'(r(y), c) >= gamma'}.
    Without a hole this is the guard itself.
    """

    def __init__(
        self,
        M: np.ndarray,
        guard: Polytope,
        hole: ResetBall | None = None,
        projector: PolytopeProjector | None = None,
    ) -> None:
        self.M = np.asarray(M, dtype=float)
        self.guard = guard
        self.hole = hole if hole is not None and hole.radius > 0.0 else None
        self.projector = projector or PolytopeProjector(self.M, guard)

    @property
    def is_empty(self) -> bool:
        return self.guard.is_empty

    @cached_property
    def chart(self) -> GuardChart:
        return GuardChart.of(self.guard)

    def distances(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(witnesses, phi-distances) for the rows of P."""
        Y, sq = self.projector.project(P)
        dist = np.sqrt(sq)
        if self.hole is None or self.guard.is_empty:
            return Y, dist
        inside = self.hole.values(Y) < self.hole.radius
        for row in np.flatnonzero(inside):
            y, d = self._carved_point(P[row])
            Y[row] = y
            dist[row] = d
        return Y, dist

    def _carved_point(self, p: np.ndarray) -> tuple[np.ndarray, float]:
        chart = self.chart
        if chart.dim == 0:
            return np.full_like(p, np.nan), np.inf
        if chart.dim == 1:
            return self._carved_on_line(p, chart)
        return self._carved_slsqp(p)

    def _carved_on_line(self, p: np.ndarray, chart: GuardChart) -> tuple[np.ndarray, float]:
        span = chart.interval()
        if span is None:
            return np.full_like(p, np.nan), np.inf
        lo, hi = span
        u = chart.basis[:, 0]
        o = chart.origin
        M = self.M
        fa = float(u @ M @ u)
        fb = float(2.0 * u @ M @ (o - p))
        fc = float((o - p) @ M @ (o - p))

        hole = self.hole
        w = hole.reset.R @ u
        z0 = hole.reset.R @ o + hole.reset.s - hole.center
        qa = float(w @ hole.metric @ w)
        qb = float(2.0 * w @ hole.metric @ z0)
        qc = float(z0 @ hole.metric @ z0) - hole.radius**2

        # pieces of [lo, hi] where q(s) >= 0
        pieces: list[tuple[float, float]] = []
        if qa > 1e-14:
            disc = qb * qb - 4.0 * qa * qc
            if disc <= 0.0:
                pieces.append((lo, hi))
            else:
                root = np.sqrt(disc)
                s1 = (-qb - root) / (2.0 * qa)
                s2 = (-qb + root) / (2.0 * qa)
                pieces.extend([(lo, min(hi, s1)), (max(lo, s2), hi)])
        elif abs(qb) > 1e-14:
            s0 = -qc / qb
            pieces.append((max(lo, s0), hi) if qb > 0 else (lo, min(hi, s0)))
        elif qc >= 0.0:
            pieces.append((lo, hi))

        best_val, best_s = np.inf, None
        s_free = -fb / (2.0 * fa)
        for a, b in pieces:
            if a > b:
                continue
            s = float(np.clip(s_free, a, b))
            val = fa * s * s + fb * s + fc
            if val < best_val:
                best_val, best_s = val, s
        if best_s is None:
            return np.full_like(p, np.nan), np.inf
        return o + best_s * u, float(np.sqrt(max(best_val, 0.0)))

    def _carved_slsqp(self, p: np.ndarray) -> tuple[np.ndarray, float]:
        H, h, M = self.guard.H, self.guard.h, self.M
        hole = self.hole
        cons = [
            {"type": "ineq", "fun": lambda y: h - H @ y},
            {"type": "ineq", "fun": lambda y: hole.values(y)[0] ** 2 - hole.radius**2},
        ]
        y0, _ = self.projector.project(p[None, :])
        starts = [y0[0]]
        basis = self.chart.basis
        for j in range(basis.shape[1]):
            for sign in (1.0, -1.0):
                starts.append(y0[0] + sign * 2.0 * hole.radius * basis[:, j] / max(
                    1e-12, np.sqrt(basis[:, j] @ M @ basis[:, j])
                ))
        best_val, best_y = np.inf, np.full_like(p, np.nan)
        for start in starts:
            res = minimize(
                lambda y: float((y - p) @ M @ (y - p)),
                start,
                jac=lambda y: 2.0 * M @ (y - p),
                constraints=cons,
                method="SLSQP",
                options={"ftol": 1e-12, "maxiter": 300},
            )
            y = res.x
            if not self.guard.contains(y, 1e-7) or hole.values(y)[0] < hole.radius - 1e-7:
                continue
            val = float((y - p) @ M @ (y - p))
            if val < best_val:
                best_val, best_y = val, y
        return best_y, float(np.sqrt(best_val)) if np.isfinite(best_val) else np.inf


class PolytopeTarget:
    """Distance target wrapping a plain polytope (closure)."""

    def __init__(
        self,
        M: np.ndarray,
        polytope: Polytope,
        projector: PolytopeProjector | None = None,
    ) -> None:
        self.projector = projector or PolytopeProjector(M, polytope)

    @property
    def is_empty(self) -> bool:
        return self.projector.is_empty

    def distances(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Y, sq = self.projector.project(P)
        return Y, np.sqrt(sq)
