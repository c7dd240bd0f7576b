# safehood/models/loader.py
from __future__ import annotations

import itertools
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError
from scipy.optimize import linprog

from safehood.errors import BisimulationError, ModelError
from safehood.models.automaton import (
    AffineMap,
    EventDef,
    HybridAutomaton,
    InitialSet,
    Location,
    Polytope,
)
from safehood.models.schema import ModelDocument, PolytopeDoc

logger = logging.getLogger(__name__)

# share of the initial set's phi-diameter used when d_thr is not given
D_THR_FRACTION = 0.2


# ---------- Helpers ----------

def _matrix(value: Any, rows: int, cols: int, locus: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == rows * cols:
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise ModelError(f"expected a {rows}x{cols} matrix, got shape {arr.shape}", locus=locus)
    return arr


def _vector(value: Any, n: int, locus: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size != n:
        raise ModelError(f"expected {n} entries, got {arr.size}", locus=locus)
    return arr


def _polytope(doc: PolytopeDoc | Any, n: int, locus: str, H_key: str = "H", h_key: str = "h") -> Polytope:
    H_raw = getattr(doc, H_key)
    h_raw = getattr(doc, h_key)
    m = len(h_raw)
    if len(H_raw) != m:
        raise ModelError(f"{len(H_raw)} rows in H but {m} entries in h", locus=f"{locus}.{H_key}")
    H = _matrix(H_raw, m, n, f"{locus}.{H_key}") if m else np.zeros((0, n))
    h = np.asarray(h_raw, dtype=float)
    strict = getattr(doc, "strict", None)
    if strict is not None and len(strict) != m:
        raise ModelError(f"{len(strict)} strict flags for {m} rows", locus=f"{locus}.strict")
    return Polytope(H, h, strict=tuple(strict) if strict else ())


def _is_full_dimensional(P: Polytope) -> bool:
    """Chebyshev-ball test: some ball of positive radius fits inside P."""
    if P.n_rows == 0:
        return True
    norms = np.linalg.norm(P.H, axis=1)
    c = np.zeros(P.dim + 1)
    c[-1] = -1.0
    res = linprog(
        c,
        A_ub=np.hstack([P.H, norms[:, None]]),
        b_ub=P.h,
        bounds=[(None, None)] * P.dim + [(0, 1.0)],
        method="highs",
    )
    return res.status == 0 and -res.fun > 1e-12


def _validation_locus(exc: ValidationError) -> tuple[str, str]:
    err = exc.errors()[0]
    locus = ".".join(str(p) for p in err.get("loc", ()))
    return err.get("msg", str(exc)), locus


# ---------- Load ----------

def load_model(text: str) -> HybridAutomaton:
    """Parse and dimension-check a model document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(exc.msg, locus=f"line {exc.lineno}, column {exc.colno}") from exc
    try:
        doc = ModelDocument.model_validate(raw)
    except ValidationError as exc:
        msg, locus = _validation_locus(exc)
        raise ModelError(msg, locus=locus or None) from exc
    return build_automaton(doc)


def load_model_file(path: str | Path) -> HybridAutomaton:
    p = Path(path)
    if p.is_dir():
        candidates = sorted(p.glob("*.json"))
        if not candidates:
            raise ModelError(f"no model document in directory {p}")
        p = candidates[0]
    elif not p.exists() and p.with_suffix(".json").exists():
        p = p.with_suffix(".json")
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelError(f"cannot read model: {exc}", locus=str(p)) from exc
    return load_model(text)


def build_automaton(doc: ModelDocument) -> HybridAutomaton:
    n = doc.dimension

    ids: set[str] = set()
    locations: list[Location] = []
    for i, ld in enumerate(doc.locations):
        locus = f"locations.{i}"
        if ld.id in ids:
            raise ModelError(f"duplicate location id {ld.id!r}", locus=f"{locus}.id")
        ids.add(ld.id)
        A = _matrix(ld.A, n, n, f"{locus}.A")
        b = _vector(ld.b, n, f"{locus}.b") if ld.b is not None else np.zeros(n)
        inv = _polytope(ld.invariant, n, f"{locus}.invariant")
        M = _matrix(ld.M, n, n, f"{locus}.M") if ld.M is not None else None
        degenerate = not _is_full_dimensional(inv)
        if degenerate:
            logger.warning("invariant of location %s is not full-dimensional", ld.id)
        locations.append(Location(ld.id, A, b, inv, metric=M, degenerate=degenerate))

    def known(loc_id: str, locus: str) -> str:
        if loc_id not in ids:
            raise ModelError(f"unknown location id {loc_id!r}", locus=locus)
        return loc_id

    by_id = {loc.id: loc for loc in locations}
    events: list[EventDef] = []
    event_ids: set[str] = set()
    for i, ed in enumerate(doc.events):
        locus = f"events.{i}"
        source = known(ed.source, f"{locus}.source")
        target = known(ed.target, f"{locus}.target")
        event_id = ed.id or f"e{i + 1}"
        if event_id in event_ids:
            raise ModelError(f"duplicate event id {event_id!r}", locus=f"{locus}.id")
        event_ids.add(event_id)
        guard = _polytope(ed.guard, n, f"{locus}.guard")
        if ed.facet >= by_id[source].invariant.n_rows:
            raise ModelError(
                f"facet {ed.facet} does not exist in Inv({source}) "
                f"({by_id[source].invariant.n_rows} rows)",
                locus=f"{locus}.facet",
            )
        if ed.reset is None:
            reset = AffineMap.identity(n)
        else:
            R = _matrix(ed.reset.R, n, n, f"{locus}.reset.R")
            s = _vector(ed.reset.s, n, f"{locus}.reset.s") if ed.reset.s is not None else np.zeros(n)
            reset = AffineMap(R, s)
        events.append(EventDef(i, event_id, source, target, guard, ed.facet, reset))

    unsafe: dict[str, list[Polytope]] = {}
    for i, ud in enumerate(doc.unsafe):
        locus = f"unsafe.{i}"
        loc_id = known(ud.location, f"{locus}.location")
        unsafe.setdefault(loc_id, []).append(_polytope(ud, n, locus))

    init_doc = doc.initial
    init_loc = known(init_doc.location, "initial.location")
    if init_doc.point is not None:
        lo = hi = _vector(init_doc.point, n, "initial.point")
    else:
        lo = _vector(init_doc.lo, n, "initial.lo")
        hi = _vector(init_doc.hi, n, "initial.hi")
        if np.any(lo > hi):
            raise ModelError("lo exceeds hi", locus="initial")
    initial = InitialSet(init_loc, lo, hi)

    H = HybridAutomaton(
        dimension=n,
        locations=tuple(locations),
        events=tuple(events),
        initial=initial,
        unsafe={k: tuple(v) for k, v in unsafe.items()},
        config=doc.config,
        name=doc.name,
    )
    if doc.config.d_thr is None:
        H = resolve_threshold(H)
    return H


def resolve_threshold(H: HybridAutomaton) -> HybridAutomaton:
    """d_thr = 0.2 * phi-diameter of the initial box, in the initial location's metric."""
    from dataclasses import replace

    from safehood.verification.bisim import build_metrics

    try:
        metric = build_metrics(H, H.config.dist_tol)[H.initial.location]
    except BisimulationError as exc:
        logger.warning("d_thr left unresolved: %s", exc)
        return H
    corners = H.initial.corners()
    diameter = max((metric(a, b) for a, b in itertools.combinations(corners, 2)), default=0.0)
    d_thr = D_THR_FRACTION * diameter
    if d_thr == 0.0:
        logger.info("initial set is a point: d_thr resolves to 0, safe mode reduces to robust mode")
    return replace(H, config=H.config.with_overrides(d_thr=d_thr))


# ---------- Dump ----------

def _poly_doc(P: Polytope, strict: bool = False) -> dict:
    doc: dict[str, Any] = {"H": P.H.tolist(), "h": P.h.tolist()}
    if strict and any(P.strict):
        doc["strict"] = list(P.strict)
    return doc


def dump_model(H: HybridAutomaton) -> str:
    """Inverse of load_model; floats are written with repr, so they read back exactly."""
    doc: dict[str, Any] = {
        "name": H.name,
        "dimension": H.dimension,
        "locations": [],
        "events": [],
        "unsafe": [],
        "initial": {
            "location": H.initial.location,
            "lo": H.initial.lo.tolist(),
            "hi": H.initial.hi.tolist(),
        },
        "config": H.config.model_dump(),
    }
    for loc in H.locations:
        entry: dict[str, Any] = {
            "id": loc.id,
            "A": loc.A.tolist(),
            "b": loc.b.tolist(),
            "invariant": _poly_doc(loc.invariant, strict=True),
        }
        if loc.metric is not None:
            entry["M"] = loc.metric.tolist()
        doc["locations"].append(entry)
    for event in H.events:
        doc["events"].append(
            {
                "id": event.id,
                "source": event.source,
                "target": event.target,
                "guard": _poly_doc(event.guard, strict=True),
                "facet": event.facet,
                "reset": {"R": event.reset.R.tolist(), "s": event.reset.s.tolist()},
            }
        )
    for loc_id, polys in H.unsafe.items():
        for P in polys:
            doc["unsafe"].append({"location": loc_id, **_poly_doc(P)})
    return json.dumps(doc, indent=2)


# ---------- Assumption checks ----------

def validate_assumptions(H: HybridAutomaton, tol: float | None = None) -> list[str]:
    """
    One diagnostic per violated standing assumption: guards inside the
    closure of their invariant, each guard on its declared facet, and the
    guards of a location pairwise disjoint. Affine dynamics always have
    unique global solutions, so that assumption needs no check.
    """
    tol = H.config.dist_tol if tol is None else tol
    out: list[str] = []
    for event, loc in H.iter_guards():
        guard = event.guard
        if guard.is_empty:
            out.append(f"guard {event.id} of {loc.id} is empty")
            continue
        inv = loc.invariant
        outside = [i for i in range(inv.n_rows) if guard.support(inv.H[i]) > inv.h[i] + tol]
        if outside:
            out.append(f"guard {event.id} is not contained in Inv({loc.id}) (rows {outside})")
        normal, rhs = inv.H[event.facet], inv.h[event.facet]
        if guard.support(normal) > rhs + tol or -guard.support(-normal) < rhs - tol:
            out.append(f"guard {event.id} not on facet {event.facet} of Inv({loc.id})")

    for loc in H.locations:
        events = H.events_from(loc.id)
        for a, b in itertools.combinations(events, 2):
            if not a.guard.tightened(tol).intersect(b.guard.tightened(tol)).is_empty:
                out.append(
                    f"guards {a.id} and {b.id} of {loc.id} overlap; guards of a location must be disjoint"
                )
    return out
