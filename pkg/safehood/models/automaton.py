# safehood/models/automaton.py
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np
from scipy.optimize import linprog

from safehood.config import VerificationConfig

# LP feasibility slack; distances are compared against dist_tol elsewhere
_LP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Polytope:
    """
    {x | Hx <= h}. Equalities are two opposite rows. `strict` flags rows that
    the model declared as strict inequalities; only guard membership and the
    guard-disjointness check look at them, distances always use the closure.
    """

    H: np.ndarray
    h: np.ndarray
    strict: tuple[bool, ...] = ()
    tagged_empty: bool = False

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.shape[0] != h.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        strict = tuple(self.strict) if self.strict else (False,) * h.shape[0]
        if len(strict) != h.shape[0]:
            raise ValueError("strict flags must match the number of rows")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "strict", strict)

    # ---------- Constructors ----------

    @classmethod
    def whole_space(cls, n: int) -> "Polytope":
        return cls(np.zeros((0, n)), np.zeros(0))

    @classmethod
    def empty_set(cls, n: int) -> "Polytope":
        return cls(np.zeros((0, n)), np.zeros(0), tagged_empty=True)

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = lo.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    # ---------- Shape ----------

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    # ---------- Membership ----------

    def residuals(self, X: np.ndarray) -> np.ndarray:
        """Hx - h for each row x of X (shape (k, m))."""
        X = np.atleast_2d(X)
        return X @ self.H.T - self.h

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        """Membership in the closure, with slack tol."""
        if self.is_empty:
            return False
        if self.n_rows == 0:
            return True
        return bool(np.all(self.H @ np.asarray(x, dtype=float) - self.h <= tol))

    def contains_honoring_strict(self, x: np.ndarray, tol: float) -> bool:
        """Closed rows get slack +tol, strict rows must hold with margin tol."""
        if self.is_empty:
            return False
        if self.n_rows == 0:
            return True
        res = self.H @ np.asarray(x, dtype=float) - self.h
        margin = np.where(np.array(self.strict), -tol, tol)
        return bool(np.all(res <= margin))

    # ---------- LPs ----------

    @cached_property
    def is_empty(self) -> bool:
        if self.tagged_empty:
            return True
        if self.n_rows == 0:
            return False
        res = linprog(
            np.zeros(self.dim),
            A_ub=self.H,
            b_ub=self.h + _LP_TOL,
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        return res.status == 2

    def tightened(self, margin: float) -> "Polytope":
        """Strict rows moved inward by margin; used for disjointness tests."""
        shift = np.where(np.array(self.strict), margin, 0.0)
        return Polytope(self.H, self.h - shift, tagged_empty=self.tagged_empty)

    def support(self, c: np.ndarray) -> float:
        """sup { c.x | x in P }; +inf when unbounded, -inf when empty."""
        if self.is_empty:
            return -np.inf
        if self.n_rows == 0:
            return 0.0 if not np.any(c) else np.inf
        res = linprog(
            -np.asarray(c, dtype=float),
            A_ub=self.H,
            b_ub=self.h,
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        if res.status == 3:
            return np.inf
        if res.status != 0:
            return -np.inf
        return float(-res.fun)

    def intersect(self, other: "Polytope") -> "Polytope":
        return Polytope(
            np.vstack([self.H, other.H]),
            np.concatenate([self.h, other.h]),
            strict=self.strict + other.strict,
            tagged_empty=self.tagged_empty or other.tagged_empty,
        )

    # ---------- Structure ----------

    @cached_property
    def equality_pairs(self) -> tuple[tuple[int, int], ...]:
        """Index pairs (i, j) with row j = -row i, i.e. encoded equalities."""
        pairs: list[tuple[int, int]] = []
        used: set[int] = set()
        norms = np.linalg.norm(self.H, axis=1)
        for i, j in itertools.combinations(range(self.n_rows), 2):
            if i in used or j in used or norms[i] == 0 or norms[j] == 0:
                continue
            if np.allclose(self.H[i] / norms[i], -self.H[j] / norms[j], atol=1e-12) and np.isclose(
                self.h[i] / norms[i], -self.h[j] / norms[j], atol=1e-12
            ):
                pairs.append((i, j))
                used.update((i, j))
        return tuple(pairs)

    def vertices_2d(self, bound: float = 1e3) -> np.ndarray:
        """
        Vertices of P clipped to the square [-bound, bound]^2, ordered
        counter-clockwise. Empty array when P is empty.
        """
        if self.dim != 2:
            raise ValueError("vertices_2d needs a 2-D polytope")
        clipped = self.intersect(Polytope.box([-bound, -bound], [bound, bound]))
        H, h = clipped.H, clipped.h
        points: list[np.ndarray] = []
        for i, j in itertools.combinations(range(H.shape[0]), 2):
            sub = H[[i, j]]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            p = np.linalg.solve(sub, h[[i, j]])
            if np.all(H @ p - h <= 1e-9 * max(1.0, bound)):
                points.append(p)
        if not points:
            return np.zeros((0, 2))
        pts = np.unique(np.round(np.array(points), 12), axis=0)
        centroid = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0]))
        return pts[order]


@dataclass(frozen=True, eq=False)
class AffineMap:
    """r(y) = R y + s"""

    R: np.ndarray
    s: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float).reshape(-1))

    @classmethod
    def identity(cls, n: int) -> "AffineMap":
        return cls(np.eye(n), np.zeros(n))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.R @ np.asarray(y, dtype=float) + self.s


@dataclass(frozen=True, eq=False)
class Location:
    id: str
    A: np.ndarray
    b: np.ndarray
    invariant: Polytope
    # user-supplied bisimulation matrix; None means solve a Lyapunov equation
    metric: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1))
        if self.metric is not None:
            object.__setattr__(self, "metric", np.atleast_2d(np.asarray(self.metric, dtype=float)))

    def vector_field(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b


@dataclass(frozen=True, eq=False)
class EventDef:
    index: int
    id: str
    source: str
    target: str
    guard: Polytope
    facet: int
    reset: AffineMap


@dataclass(frozen=True, eq=False)
class InitialSet:
    location: str
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(-1))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(-1))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def is_point(self) -> bool:
        return bool(np.all(self.lo == self.hi))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)


@dataclass(frozen=True, eq=False)
class HybridAutomaton:
    dimension: int
    locations: tuple[Location, ...]
    events: tuple[EventDef, ...]
    initial: InitialSet
    unsafe: dict[str, tuple[Polytope, ...]] = field(default_factory=dict)
    config: VerificationConfig = field(default_factory=VerificationConfig)
    name: str = "model"

    @cached_property
    def _by_id(self) -> dict[str, Location]:
        return {loc.id: loc for loc in self.locations}

    def location(self, loc_id: str) -> Location:
        return self._by_id[loc_id]

    def has_location(self, loc_id: str) -> bool:
        return loc_id in self._by_id

    def events_from(self, loc_id: str) -> tuple[EventDef, ...]:
        return tuple(e for e in self.events if e.source == loc_id)

    def unsafe_in(self, loc_id: str) -> tuple[Polytope, ...]:
        return self.unsafe.get(loc_id, ())

    def iter_guards(self) -> Iterator[tuple[EventDef, Location]]:
        for event in self.events:
            yield event, self.location(event.source)

    @cached_property
    def active_guards(self) -> tuple[Polytope, ...]:
        """
        G_act per event: the guard cut down to the part of its facet where the
        flow points outward, n.(Ay + b) >= 0 with n the facet's outward normal.
        """
        parts = []
        for event, loc in self.iter_guards():
            inv = loc.invariant
            if event.facet >= inv.n_rows:
                parts.append(event.guard)
                continue
            normal = inv.H[event.facet]
            row = -(normal @ loc.A)
            rhs = float(normal @ loc.b)
            parts.append(
                event.guard.intersect(Polytope(row.reshape(1, -1), np.array([rhs])))
            )
        return tuple(parts)
