# safehood/models/schema.py
"""
Model document schema. A document is JSON:

    {
      "name": "...",
      "dimension": 2,
      "locations": [{"id", "A", "b", "invariant": {"H", "h"}, "M"?}],
      "events": [{"id", "source", "target", "guard": {"H", "h", "strict"?}, "facet", "reset": {"R", "s"}?}],
      "unsafe": [{"location", "H", "h"}],
      "initial": {"location", "lo", "hi"} or {"location", "point"},
      "config": {...VerificationConfig fields}
    }

Matrices are lists of rows; a flat row-major list of length n*n is accepted too.
"""
from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from safehood.config import VerificationConfig

Matrix = List[List[float]]
Vector = List[float]


class PolytopeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    H: Matrix = Field(default_factory=list)
    h: Vector = Field(default_factory=list)
    strict: Optional[List[bool]] = None


class LocationDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    A: List[float] | Matrix
    b: Optional[Vector] = None
    invariant: PolytopeDoc = Field(default_factory=PolytopeDoc)
    M: Optional[List[float] | Matrix] = None


class ResetDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    R: List[float] | Matrix
    s: Optional[Vector] = None


class EventDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: Optional[str] = None
    source: str
    target: str
    guard: PolytopeDoc
    facet: int = Field(ge=0)
    reset: Optional[ResetDoc] = None


class UnsafeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    location: str
    H: Matrix = Field(default_factory=list)
    h: Vector = Field(default_factory=list)


class InitialDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    location: str
    lo: Optional[Vector] = None
    hi: Optional[Vector] = None
    point: Optional[Vector] = None

    @model_validator(mode="after")
    def _box_or_point(self) -> "InitialDoc":
        if self.point is not None:
            if self.lo is not None or self.hi is not None:
                raise ValueError("give either point or lo/hi, not both")
        elif self.lo is None or self.hi is None:
            raise ValueError("initial set needs point or both lo and hi")
        return self


class ModelDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "model"
    dimension: int = Field(ge=1)
    locations: List[LocationDoc] = Field(min_length=1)
    events: List[EventDoc] = Field(default_factory=list)
    unsafe: List[UnsafeDoc] = Field(default_factory=list)
    initial: InitialDoc
    config: VerificationConfig = Field(default_factory=VerificationConfig)
