# safehood/routers/simulate.py
from __future__ import annotations

import json
from dataclasses import replace
from importlib import resources
from typing import Any, Dict, List, Optional

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field, model_validator

from safehood.errors import BisimulationError, ModelError, PreconditionError
from safehood.models.automaton import HybridAutomaton, InitialSet
from safehood.models.loader import load_model
from safehood.models.trajectory import HybridTrajectory
from safehood.verification.simulate import simulate

router = APIRouter()


# ---------- Helpers ----------

def resolve_request_model(
    model: Optional[Dict[str, Any]],
    bundled: Optional[str],
    overrides: Dict[str, Any],
    initial_state: Optional[List[float]] = None,
    initial_location: Optional[str] = None,
) -> HybridAutomaton:
    """Inline document or bundled model name, with config overrides applied."""
    try:
        if model is not None:
            H = load_model(json.dumps(model))
        else:
            res = resources.files("safehood.data").joinpath(f"{bundled}.json")
            if not res.is_file():
                raise HTTPException(status_code=404, detail=f"no bundled model named {bundled!r}")
            H = load_model(res.read_text(encoding="utf-8"))
        try:
            cfg = H.config.with_overrides(**overrides)
        except ValueError as e:
            raise ModelError(str(e), locus="config") from e
    except (ModelError, BisimulationError) as e:
        raise HTTPException(status_code=422, detail=str(e))

    init = H.initial
    loc = initial_location or init.location
    if initial_state is not None:
        if len(initial_state) != H.dimension:
            raise HTTPException(status_code=422, detail=f"initial_state needs {H.dimension} entries")
        init = InitialSet(loc, np.asarray(initial_state), np.asarray(initial_state))
    elif loc != init.location:
        init = InitialSet(loc, init.lo, init.hi)
    if not H.has_location(init.location):
        raise HTTPException(status_code=422, detail=f"unknown location id {init.location!r}")
    return replace(H, config=cfg, initial=init)


def run_simulation(H: HybridAutomaton) -> HybridTrajectory:
    cfg = H.config
    try:
        return simulate(H, H.initial.location, H.initial.center, 0.0, cfg.t_end, cfg)
    except PreconditionError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ModelError as e:
        raise HTTPException(status_code=422, detail=str(e))


# ---------- Schemas ----------

class ModelRequest(BaseModel):
    model: Optional[Dict[str, Any]] = None
    bundled: Optional[str] = Field(default=None, min_length=1)
    initial_state: Optional[List[float]] = None
    initial_location: Optional[str] = None
    sim_time: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one_source(self) -> "ModelRequest":
        if (self.model is None) == (self.bundled is None):
            raise ValueError("give exactly one of model or bundled")
        return self

    def overrides(self) -> Dict[str, Any]:
        return {"t_end": self.sim_time}


class EventOut(BaseModel):
    event: str
    source: str
    target: str
    time: float
    trigger_state: List[float]
    reset_state: List[float]


class SegmentOut(BaseModel):
    location: str
    t0: float
    t_end: float
    x0: List[float]
    x_end: List[float]


class SimulateResponse(BaseModel):
    status: str
    segments: List[SegmentOut]
    events: List[EventOut]
    diagnostics: List[str]


def trajectory_out(traj: HybridTrajectory) -> SimulateResponse:
    return SimulateResponse(
        status=traj.status.value,
        segments=[
            SegmentOut(
                location=s.location,
                t0=s.t0,
                t_end=s.t_end,
                x0=s.x0.tolist(),
                x_end=s.end_state.tolist(),
            )
            for s in traj.segments
        ],
        events=[
            EventOut(
                event=e.event_id,
                source=e.source,
                target=e.target,
                time=e.time,
                trigger_state=e.trigger_state.tolist(),
                reset_state=e.reset_state.tolist(),
            )
            for e in traj.events
        ],
        diagnostics=list(traj.diagnostics),
    )


# ---------- Endpoints ----------

@router.post(
    "",
    response_model=SimulateResponse,
    summary="Simulate one hybrid trajectory",
)
def simulate_endpoint(payload: ModelRequest):
    """
    Example:
    POST /simulate {"bundled": "paper_sec2_5", "initial_state": [1.25, 1.9]}
    """
    H = resolve_request_model(
        payload.model, payload.bundled, payload.overrides(), payload.initial_state, payload.initial_location
    )
    return trajectory_out(run_simulation(H))
