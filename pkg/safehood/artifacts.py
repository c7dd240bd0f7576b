# safehood/artifacts.py
"""
Run-directory writers: trajectory CSVs, the JSON report, the neighborhood
dump, the manifest, and the plot-data layers built from a finished run.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from safehood.errors import ArtifactError
from safehood.models.automaton import HybridAutomaton, Polytope
from safehood.models.trajectory import HybridTrajectory
from safehood.verification.cover import CoverageReport
from safehood.verification.robust import Neighborhood
from safehood.verification.safe import EnlargedReach, EventTreeNode

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
ELLIPSE_POINTS = 96


# ---------- Manifest ----------

@dataclass
class RunManifest:
    model: str
    command: str
    overrides: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    output_dir: str = ""
    artifacts: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    created_at: str = ""

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "command": self.command,
            "overrides": self.overrides,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "artifacts": self.artifacts,
            "wall_time": self.wall_time,
            "created_at": self.created_at,
        }


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    """Written last: every listed artifact must already exist."""
    missing = [a for a in manifest.artifacts if not (run_dir / a).exists()]
    if missing:
        raise ArtifactError(f"artifacts missing before manifest write: {missing}")
    manifest.created_at = datetime.now(timezone.utc).isoformat()
    path = run_dir / MANIFEST
    _atomic_write(path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(run_dir: Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise ArtifactError(f"no {MANIFEST} in {run_dir}")
    data = json.loads(path.read_text(encoding="utf-8"))
    return RunManifest(**data)


# ---------- Writers ----------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(path: Path, traj: HybridTrajectory) -> Path:
    """
    Columns: segment_index, location, t, x1..xn, event. Samples on each
    segment's time grid; the trigger row closing a segment and the reset row
    opening the next one carry the event id, every other row leaves it empty.
    """
    n = traj.segments[0].x0.size if traj.segments else 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_index", "location", "t", *[f"x{i + 1}" for i in range(n)], "event"])
        entered_by = ""
        for k, seg in enumerate(traj.segments):
            left_by = seg.exit.event_id if seg.exit is not None else ""
            last = seg.sample_times.size - 1
            for j, (t, x) in enumerate(zip(seg.sample_times, seg.samples)):
                flag = left_by if j == last and left_by else (entered_by if j == 0 else "")
                writer.writerow([k, seg.location, _fmt(t), *map(_fmt, x), flag])
            entered_by = left_by
    return path


def write_neighborhoods_csv(path: Path, rows: Iterable[tuple[Neighborhood, str]]) -> Path:
    """Columns: center_x1..xn, radius, kind, critical_class, location."""
    rows = list(rows)
    n = rows[0][0].center.size if rows else 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*[f"center_x{i + 1}" for i in range(n)], "radius", "kind", "critical_class", "location"])
        for nb, label in rows:
            writer.writerow([*map(_fmt, nb.center), _fmt(nb.radius), nb.kind.value, label, nb.location])
    return path


def write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------- Report payloads ----------

def trajectory_summary(traj: HybridTrajectory) -> dict:
    return {
        "status": traj.status.value,
        "segments": len(traj.segments),
        "locations": list(traj.locations),
        "events": [
            {
                "event": e.event_id,
                "source": e.source,
                "target": e.target,
                "time": e.time,
                "trigger_state": e.trigger_state.tolist(),
                "reset_state": e.reset_state.tolist(),
            }
            for e in traj.events
        ],
        "diagnostics": list(traj.diagnostics),
    }


def neighborhood_payload(nb: Neighborhood) -> dict:
    return {
        "location": nb.location,
        "center": nb.center.tolist(),
        "radius": nb.radius,
        "kind": nb.kind.value,
        "metric": nb.metric.M.tolist(),
        "bottleneck": nb.bottleneck.to_dict() if nb.bottleneck else None,
    }


def coverage_payload(report: CoverageReport) -> dict:
    return {
        "mode": report.mode.value,
        "verdict": report.verdict.value,
        "covered_fraction": report.covered_fraction,
        "simulations": report.simulations,
        "depth_reached": report.depth_reached,
        "audit_failures": report.audit_failures,
        "counterexample": None
        if report.counterexample is None
        else {
            "location": report.counterexample.location,
            "entry_time": report.counterexample.entry_time,
            "entry_state": np.asarray(report.counterexample.entry_state).tolist(),
            "trajectory": trajectory_summary(report.counterexample.trajectory),
        },
        "samples": [
            {
                "state": s.state.tolist(),
                "lo": s.lo.tolist(),
                "hi": s.hi.tolist(),
                "depth": s.depth,
                "radius": s.neighborhood.radius,
                "d_min": list(s.radii),
                "critical_class": s.criticality.label.value,
                "status": s.status.value,
                "covered": s.covered,
            }
            for s in report.samples
        ],
        "diagnostics": report.diagnostics,
    }


def reach_payload(reach: EnlargedReach) -> dict:
    return {
        "root": trajectory_summary(reach.root),
        "branches": [
            {
                "parent": b.parent,
                "event": b.event_id,
                "time": b.time,
                "point": np.asarray(b.point).tolist(),
                "depth": b.depth,
                "trajectory": trajectory_summary(b.trajectory),
            }
            for b in reach.branches
        ],
    }


def tree_payload(tree: EventTreeNode) -> dict:
    return tree.to_dict()


# ---------- Plot data ----------

def ellipse_boundary(center: np.ndarray, M: np.ndarray, radius: float, k: int = ELLIPSE_POINTS) -> np.ndarray:
    """Points p with (p - c)^T M (p - c) = radius^2, for 2-D M."""
    L = np.linalg.cholesky(M)
    theta = np.linspace(0.0, 2.0 * np.pi, k, endpoint=False)
    U = np.vstack([np.cos(theta), np.sin(theta)])
    return (center[:, None] + radius * np.linalg.solve(L.T, U)).T


def _read_trajectory_csv(path: Path) -> list[tuple[int, str, list[float]]]:
    """(segment_index, location, [t, x1..xn]) per row; the event column is dropped."""
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            values = [float(v) for k, v in row.items() if k == "t" or (k.startswith("x") and k[1:].isdigit())]
            rows.append((int(row["segment_index"]), row["location"], values))
    return rows


def _polygon_key(P: Polytope) -> tuple:
    return (tuple(np.round(P.H, 12).ravel()), tuple(np.round(P.h, 12)))


def write_plot_layers(run_dir: Path, H: HybridAutomaton) -> list[str]:
    """
    Layers: trajectories (one polyline per segment), guards, unsafe sets
    (deduplicated by geometry) and neighborhood ellipses. Returns the
    written file names relative to the run directory.
    """
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    out_dir = run_dir / "plot"
    out_dir.mkdir(exist_ok=True)
    written: list[str] = []

    polylines: dict[tuple[str, int], list[list[float]]] = {}
    for name in manifest.artifacts:
        if name.startswith("trajectory") and name.endswith(".csv"):
            for seg, loc, values in _read_trajectory_csv(run_dir / name):
                polylines.setdefault((name, seg), []).append([loc, *values])
    if polylines:
        path = out_dir / "trajectories.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["polyline", "location", "t", *[f"x{i + 1}" for i in range(H.dimension)]])
            for pid, key in enumerate(sorted(polylines)):
                for loc, *vals in polylines[key]:
                    writer.writerow([pid, loc, *map(_fmt, vals)])
        written.append("plot/trajectories.csv")

    if H.dimension != 2:
        logger.info("plot geometry layers need a 2-D model; only trajectories written")
        return written

    pts = [v[1:] for lines in polylines.values() for _, *v in lines]
    extent = float(np.max(np.abs(pts))) + 1.0 if pts else 10.0

    guard_rows = []
    for event in H.events:
        verts = event.guard.vertices_2d(bound=extent)
        if verts.shape[0]:
            guard_rows.append((event.id, verts))
    if guard_rows:
        path = out_dir / "guards.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["guard", "vertex", "x1", "x2"])
            for gid, verts in guard_rows:
                for k, v in enumerate(verts):
                    writer.writerow([gid, k, *map(_fmt, v)])
        written.append("plot/guards.csv")

    seen: dict[tuple, int] = {}
    unsafe_rows = []
    for polys in H.unsafe.values():
        for P in polys:
            key = _polygon_key(P)
            if key in seen or P.is_empty:
                continue
            seen[key] = len(seen)
            unsafe_rows.append((seen[key], P.vertices_2d(bound=extent)))
    if unsafe_rows:
        path = out_dir / "unsafe.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region", "vertex", "x1", "x2"])
            for rid, verts in unsafe_rows:
                for k, v in enumerate(verts):
                    writer.writerow([rid, k, *map(_fmt, v)])
        written.append("plot/unsafe.csv")

    report_path = run_dir / "report.json"
    nbhds = []
    if report_path.exists():
        nbhds = json.loads(report_path.read_text(encoding="utf-8")).get("neighborhoods", [])
    balls = [nb for nb in nbhds if 0.0 < nb["radius"] < np.inf]
    if balls:
        path = out_dir / "ellipses.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ellipse", "location", "vertex", "x1", "x2"])
            for eid, nb in enumerate(balls):
                boundary = ellipse_boundary(np.asarray(nb["center"]), np.asarray(nb["metric"]), nb["radius"])
                for k, v in enumerate(boundary):
                    writer.writerow([eid, nb["location"], k, *map(_fmt, v)])
        written.append("plot/ellipses.csv")
    return written
