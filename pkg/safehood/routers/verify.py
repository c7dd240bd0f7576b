# safehood/routers/verify.py
from __future__ import annotations

from dataclasses import replace
from typing import List, Literal, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from safehood.config import settings
from safehood.errors import BisimulationError, ModelError, PreconditionError
from safehood.models.automaton import InitialSet
from safehood.models.trajectory import TerminalStatus
from safehood.routers.simulate import ModelRequest, SimulateResponse, resolve_request_model, run_simulation, trajectory_out
from safehood.verification.bisim import build_metrics
from safehood.verification.cover import Verdict, cover_initial_set
from safehood.verification.robust import Criticality, Neighborhood, classify_trajectory, robust_neighborhood
from safehood.verification.safe import safe_neighborhood

router = APIRouter()


# ---------- Schemas ----------

class VerifyRequest(ModelRequest):
    mode: Literal["robust", "safe"] = "robust"
    initial_box: Optional[List[List[float]]] = Field(default=None, min_length=2, max_length=2)
    max_lead: Optional[float] = Field(default=None, ge=0)
    max_lag: Optional[float] = Field(default=None, ge=0)
    d_thr: Optional[float] = Field(default=None, ge=0)
    alpha: Optional[float] = Field(default=None, gt=0, lt=1)
    max_depth: Optional[int] = Field(default=None, ge=0)
    seed: int = 0

    def overrides(self):
        return {
            "t_end": self.sim_time,
            "tau_maxlead": self.max_lead,
            "tau_maxlag": self.max_lag,
            "d_thr": self.d_thr,
            "alpha": self.alpha,
            "coverage_max_depth": self.max_depth,
        }


class NeighborhoodOut(BaseModel):
    location: str
    center: List[float]
    radius: float
    kind: str


class VerifyResponse(BaseModel):
    mode: str
    verdict: str
    d_min: List[float] = Field(default_factory=list)
    critical_class: Optional[str] = None
    neighborhoods: List[NeighborhoodOut] = Field(default_factory=list)
    covered_fraction: Optional[float] = None
    simulations: Optional[int] = None
    trajectory: Optional[SimulateResponse] = None


def _nb_out(nb: Neighborhood, cap: float) -> NeighborhoodOut:
    radius = min(nb.radius, cap)
    return NeighborhoodOut(location=nb.location, center=nb.center.tolist(), radius=radius, kind=nb.kind.value)


# ---------- Endpoints ----------

@router.post(
    "",
    response_model=VerifyResponse,
    summary="Robust or safe neighborhoods, or coverage of a box",
)
def verify_endpoint(payload: VerifyRequest):
    """
    Example:
    POST /verify {"bundled": "paper_sec2_5", "mode": "safe"}
    """
    H = resolve_request_model(
        payload.model, payload.bundled, payload.overrides(), payload.initial_state, payload.initial_location
    )
    if payload.initial_box is not None:
        lo, hi = payload.initial_box
        if len(lo) != H.dimension or len(hi) != H.dimension or any(a > b for a, b in zip(lo, hi)):
            raise HTTPException(status_code=422, detail="initial_box must be [lo, hi] with lo <= hi")
        H = replace(H, initial=InitialSet(H.initial.location, lo, hi))

    cfg = H.config
    try:
        metrics = build_metrics(H, cfg.dist_tol)
    except BisimulationError as e:
        raise HTTPException(status_code=422, detail=str(e))

    if not H.initial.is_point:
        try:
            report = cover_initial_set(H, payload.mode, metrics, cfg, threads=settings.threads, seed=payload.seed)
        except PreconditionError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except ModelError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return VerifyResponse(
            mode=report.mode.value,
            verdict=report.verdict.value,
            neighborhoods=[_nb_out(s.neighborhood, cfg.radius_cap) for s in report.samples if s.covered],
            covered_fraction=report.covered_fraction,
            simulations=report.simulations,
        )

    traj = run_simulation(H)
    if traj.status == TerminalStatus.UNSAFE_HIT:
        return VerifyResponse(
            mode=payload.mode,
            verdict=Verdict.FALSIFIED.value,
            d_min=[0.0],
            critical_class=Criticality.UNSAFE_CRITICAL.value,
            trajectory=trajectory_out(traj),
        )
    if traj.status == TerminalStatus.BLOCKED:
        return VerifyResponse(
            mode=payload.mode,
            verdict="blocked",
            d_min=[0.0],
            trajectory=trajectory_out(traj),
        )

    robust = robust_neighborhood(H, traj, metrics, cfg)
    label = classify_trajectory(traj, robust.neighborhoods, cfg).label.value
    if payload.mode == "robust":
        nbhds = list(robust.neighborhoods)
    else:
        result = safe_neighborhood(H, H.initial.location, H.initial.center, 0.0, cfg.t_end, metrics, cfg)
        nbhds = [node.neighborhood for node in result.chain]
    verified = nbhds[0].radius > 0.0
    return VerifyResponse(
        mode=payload.mode,
        verdict=(Verdict.VERIFIED_SAFE if verified else Verdict.INCONCLUSIVE).value,
        d_min=[min(nb.radius, cfg.radius_cap) for nb in nbhds],
        critical_class=label,
        neighborhoods=[_nb_out(nb, cfg.radius_cap) for nb in nbhds],
        trajectory=trajectory_out(traj),
    )
