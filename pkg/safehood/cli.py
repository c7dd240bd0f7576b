# safehood/cli.py
"""
safehood simulate|verify|plotdata

Exit codes: 0 ok / verified-safe, 2 model or input error, 3 blocked
trajectory, 4 falsified, 5 inconclusive.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from safehood import artifacts
from safehood.config import Settings
from safehood.errors import ArtifactError, BisimulationError, ModelError, PreconditionError
from safehood.models.automaton import HybridAutomaton, InitialSet
from safehood.models.loader import load_model, load_model_file, validate_assumptions
from safehood.models.trajectory import TerminalStatus
from safehood.verification.bisim import build_metrics
from safehood.verification.cover import Mode, Verdict, cover_initial_set
from safehood.verification.robust import classify_trajectory, robust_neighborhood
from safehood.verification.safe import build_event_tree, enlarged_reach, safe_neighborhood
from safehood.verification.simulate import simulate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MODEL = 2
EXIT_BLOCKED = 3
EXIT_FALSIFIED = 4
EXIT_INCONCLUSIVE = 5


# ---------- Argument parsing ----------

def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _box(text: str) -> tuple[np.ndarray, np.ndarray]:
    if ":" not in text:
        raise argparse.ArgumentTypeError("expected lo1,lo2,...:hi1,hi2,...")
    lo, hi = text.split(":", 1)
    return _vector(lo), _vector(hi)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("model", help="model document (.json), a directory holding one, or a bundled model name")
    p.add_argument("--initial-state", type=_vector, default=None, metavar="x1,x2,...")
    p.add_argument("--initial-location", default=None)
    p.add_argument("--sim-time", type=float, default=None, help="horizon t_end")
    p.add_argument("--grid-dt", type=float, default=None, help="time grid step")
    p.add_argument("-o", "--out", default=None, help="run directory (default: <output_dir>/<model>-<command>)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safehood",
        description="Simulation-based safety verification of affine hybrid automata.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate one trajectory",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_model_args(p_sim)

    p_ver = sub.add_parser("verify", help="compute neighborhoods / cover the initial set",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_model_args(p_ver)
    p_ver.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.ROBUST.value)
    p_ver.add_argument("--initial-box", type=_box, default=None, metavar="lo1,..:hi1,..")
    p_ver.add_argument("--max-lead", type=float, default=None, help="tau_maxlead")
    p_ver.add_argument("--max-lag", type=float, default=None, help="tau_maxlag")
    p_ver.add_argument("--d-thr", type=float, default=None, help="proximity threshold (safe mode)")
    p_ver.add_argument("--alpha", type=float, default=None, help="window margin factor in (0, 1)")
    p_ver.add_argument("--max-depth", type=int, default=None, help="coverage subdivision depth")
    p_ver.add_argument("--threads", type=int, default=None, help="work pool size (default: SAFEHOOD_THREADS)")

    p_plot = sub.add_parser("plotdata", help="emit CSV plot layers for a finished run",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_plot.add_argument("run_dir")
    return parser


# ---------- Model resolution ----------

def resolve_model(spec: str) -> tuple[HybridAutomaton, str]:
    path = Path(spec)
    if path.exists() or path.with_suffix(".json").exists():
        return load_model_file(path), str(path)
    bundled = resources.files("safehood.data").joinpath(f"{path.stem}.json")
    if bundled.is_file():
        return load_model(bundled.read_text(encoding="utf-8")), f"bundled:{path.stem}"
    raise ModelError(f"no model at {spec!r} and no bundled model named {path.stem!r}")


def _overrides(args: argparse.Namespace) -> dict:
    keys = {
        "sim_time": "t_end",
        "grid_dt": "time_grid_dt",
        "max_lead": "tau_maxlead",
        "max_lag": "tau_maxlag",
        "d_thr": "d_thr",
        "alpha": "alpha",
        "max_depth": "coverage_max_depth",
    }
    return {cfg_key: getattr(args, arg) for arg, cfg_key in keys.items() if getattr(args, arg, None) is not None}


def _configure(H: HybridAutomaton, args: argparse.Namespace) -> HybridAutomaton:
    try:
        cfg = H.config.with_overrides(**_overrides(args))
    except ValueError as exc:
        raise ModelError(f"invalid override: {exc}", locus="config") from exc
    init = H.initial
    loc = args.initial_location or init.location
    if getattr(args, "initial_box", None) is not None:
        lo, hi = args.initial_box
        init = InitialSet(loc, lo, hi)
    elif args.initial_state is not None:
        init = InitialSet(loc, args.initial_state, args.initial_state)
    elif loc != init.location:
        init = InitialSet(loc, init.lo, init.hi)
    if init.lo.size != H.dimension or init.hi.size != H.dimension:
        raise ModelError(f"initial set must have {H.dimension} coordinates", locus="initial")
    if not H.has_location(init.location):
        raise ModelError(f"unknown location id {init.location!r}", locus="initial.location")
    return replace(H, config=cfg, initial=init)


def _run_dir(settings: Settings, H: HybridAutomaton, command: str, out: str | None) -> Path:
    run_dir = Path(out) if out else Path(settings.output_dir) / f"{H.name}-{command}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _fmt_radii(radii: Sequence[float]) -> str:
    return "[" + ", ".join(f"{r:.4f}" for r in radii) + "]"


# ---------- Commands ----------

def cmd_simulate(args: argparse.Namespace, settings: Settings) -> int:
    started = time.perf_counter()
    H, model_ref = resolve_model(args.model)
    H = _configure(H, args)
    for msg in validate_assumptions(H):
        logger.warning(msg)
    cfg = H.config
    traj = simulate(H, H.initial.location, H.initial.center, 0.0, cfg.t_end, cfg)

    run_dir = _run_dir(settings, H, "simulate", args.out)
    artifacts.write_trajectory_csv(run_dir / "trajectory.csv", traj)
    artifacts.write_json(run_dir / "report.json", {"command": "simulate", "trajectory": artifacts.trajectory_summary(traj)})
    manifest = artifacts.RunManifest(
        model=model_ref,
        command="simulate",
        overrides=_overrides(args),
        seed=args.seed,
        output_dir=str(run_dir),
        artifacts=["trajectory.csv", "report.json"],
        wall_time=time.perf_counter() - started,
    )
    artifacts.write_manifest(run_dir, manifest)

    print(f"segments: {len(traj.segments)}")
    print(f"events: {len(traj.events)} {list(traj.event_sequence)}")
    for e in traj.events:
        print(f"  {e.event_id}: {e.source} -> {e.target} at t={e.time:.6f}")
    print(f"status: {traj.status.value}")
    for msg in traj.diagnostics:
        print(f"diagnostic: {msg}")
    print(f"run directory: {run_dir}")
    return EXIT_BLOCKED if traj.status == TerminalStatus.BLOCKED else EXIT_OK


def _verify_state(args, settings, H, model_ref, started) -> int:
    cfg = H.config
    loc = H.initial.location
    x0 = H.initial.center
    metrics = build_metrics(H, cfg.dist_tol)
    traj = simulate(H, loc, x0, 0.0, cfg.t_end, cfg)
    run_dir = _run_dir(settings, H, "verify", args.out)
    artifacts.write_trajectory_csv(run_dir / "trajectory.csv", traj)
    payload: dict = {"command": "verify", "mode": args.mode, "trajectory": artifacts.trajectory_summary(traj)}
    names = ["trajectory.csv"]

    if traj.status == TerminalStatus.BLOCKED:
        code, verdict, radii, nbhds, label = EXIT_BLOCKED, "blocked", [0.0], [], "noncritical"
    elif traj.status == TerminalStatus.UNSAFE_HIT:
        code, verdict, radii, nbhds, label = EXIT_FALSIFIED, Verdict.FALSIFIED.value, [0.0], [], "unsafe-critical"
    else:
        robust = robust_neighborhood(H, traj, metrics, cfg)
        label = classify_trajectory(traj, robust.neighborhoods, cfg).label.value
        if args.mode == Mode.ROBUST.value:
            nbhds = list(robust.neighborhoods)
        else:
            result = safe_neighborhood(H, loc, x0, 0.0, cfg.t_end, metrics, cfg)
            nbhds = [node.neighborhood for node in result.chain]
            payload["event_tree"] = artifacts.tree_payload(build_event_tree(result))
            payload["enlarged_reach"] = artifacts.reach_payload(enlarged_reach(H, x0, 0.0, cfg.t_end, metrics, cfg, loc))
            payload["safe_diagnostics"] = result.diagnostics
        radii = [nb.radius for nb in nbhds]
        verified = nbhds[0].radius > 0.0
        code = EXIT_OK if verified else EXIT_INCONCLUSIVE
        verdict = Verdict.VERIFIED_SAFE.value if verified else Verdict.INCONCLUSIVE.value

    payload.update(
        {
            "verdict": verdict,
            "d_min": radii,
            "critical_class": label,
            "neighborhoods": [artifacts.neighborhood_payload(nb) for nb in nbhds],
        }
    )
    artifacts.write_json(run_dir / "report.json", payload)
    names.append("report.json")
    if nbhds:
        artifacts.write_neighborhoods_csv(run_dir / "neighborhoods.csv", [(nb, label) for nb in nbhds])
        names.append("neighborhoods.csv")
    _finish(run_dir, args, model_ref, "verify", names, started)

    print(f"mode: {args.mode}")
    print(f"d_min = {_fmt_radii(radii)}")
    print(f"critical class: {label}")
    print(f"verdict: {verdict}")
    print(f"run directory: {run_dir}")
    return code


def _verify_box(args, settings, H, model_ref, started) -> int:
    cfg = H.config
    metrics = build_metrics(H, cfg.dist_tol)
    threads = args.threads or settings.threads
    report = cover_initial_set(H, args.mode, metrics, cfg, threads=threads, seed=args.seed)
    run_dir = _run_dir(settings, H, "verify", args.out)
    names = []
    payload = {"command": "verify", **artifacts.coverage_payload(report)}
    payload["neighborhoods"] = [
        artifacts.neighborhood_payload(s.neighborhood) for s in report.samples if s.covered
    ]
    artifacts.write_json(run_dir / "report.json", payload)
    names.append("report.json")
    if report.samples:
        artifacts.write_neighborhoods_csv(
            run_dir / "neighborhoods.csv",
            [(s.neighborhood, s.criticality.label.value) for s in report.samples],
        )
        names.append("neighborhoods.csv")
    if report.counterexample is not None:
        artifacts.write_trajectory_csv(run_dir / "trajectory.csv", report.counterexample.trajectory)
        names.append("trajectory.csv")
    _finish(run_dir, args, model_ref, "verify", names, started)

    print(f"mode: {report.mode.value}")
    print(f"verdict: {report.verdict.value}")
    print(f"covered fraction: {report.covered_fraction:.6f}")
    print(f"simulations: {report.simulations} (depth {report.depth_reached})")
    print(f"run directory: {run_dir}")
    return {
        Verdict.VERIFIED_SAFE: EXIT_OK,
        Verdict.FALSIFIED: EXIT_FALSIFIED,
        Verdict.INCONCLUSIVE: EXIT_INCONCLUSIVE,
    }[report.verdict]


def _finish(run_dir: Path, args, model_ref: str, command: str, names: list[str], started: float) -> None:
    artifacts.write_manifest(
        run_dir,
        artifacts.RunManifest(
            model=model_ref,
            command=command,
            overrides=_overrides(args),
            seed=args.seed,
            output_dir=str(run_dir),
            artifacts=names,
            wall_time=time.perf_counter() - started,
        ),
    )


def cmd_verify(args: argparse.Namespace, settings: Settings) -> int:
    started = time.perf_counter()
    H, model_ref = resolve_model(args.model)
    H = _configure(H, args)
    for msg in validate_assumptions(H):
        logger.warning(msg)
    box_mode = args.initial_box is not None or (args.initial_state is None and not H.initial.is_point)
    if box_mode:
        return _verify_box(args, settings, H, model_ref, started)
    return _verify_state(args, settings, H, model_ref, started)


def cmd_plotdata(args: argparse.Namespace, settings: Settings) -> int:
    run_dir = Path(args.run_dir)
    manifest = artifacts.read_manifest(run_dir)
    H, _ = resolve_model(manifest.model.removeprefix("bundled:"))
    written = artifacts.write_plot_layers(run_dir, H)
    for name in written:
        print(name)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "plotdata": cmd_plotdata}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args, settings)
    except (ModelError, BisimulationError, PreconditionError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
