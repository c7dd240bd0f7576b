# safehood/config.py
from __future__ import annotations

import os
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


def _default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))


class Settings(BaseSettings):
    # ---------- App ----------
    app_env: str = "dev"
    app_name: str = "safehood"
    log_level: str = "INFO"

    # ---------- Engine ----------
    # Caps the coverage work pool (SAFEHOOD_THREADS)
    threads: int = Field(default_factory=_default_threads, ge=1)

    # ---------- Runs ----------
    output_dir: str = "runs"

    # ---------- Config ----------
    model_config = SettingsConfigDict(
        env_prefix="SAFEHOOD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


class VerificationConfig(BaseModel):
    """
    Numerical knobs of the neighborhood algorithms.

    d_thr may be left as None in a model document; it is then resolved to
    0.2 times the phi-diameter of the initial set when the model is loaded.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_thr: float | None = Field(default=None, ge=0)
    tau_maxlead: float = Field(default=0.1, ge=0)
    tau_maxlag: float = Field(default=0.1, ge=0)
    alpha: float = Field(default=0.9, gt=0, lt=1)
    t_end: float = Field(default=0.5, ge=0)

    event_tol: float = Field(default=1e-9, gt=0)
    dist_tol: float = Field(default=1e-6, gt=0)
    time_grid_dt: float = Field(default=0.005, gt=0)

    max_recursion_depth: int = Field(default=8, ge=0)
    coverage_max_depth: int = Field(default=8, ge=0)
    max_pivots: int = Field(default=16, ge=1)
    max_events: int = Field(default=10_000, ge=1)

    radius_cap: float = Field(default=1e6, gt=0)
    audit_samples: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _grid_finer_than_horizon(self) -> "VerificationConfig":
        if self.event_tol >= self.time_grid_dt:
            raise ValueError("event_tol must be smaller than time_grid_dt")
        return self

    @property
    def threshold(self) -> float:
        """d_thr with an unresolved value read as 0 (no proximal guards)."""
        return self.d_thr if self.d_thr is not None else 0.0

    def with_overrides(self, **overrides: Any) -> "VerificationConfig":
        """
        Returns a validated copy with the non-None overrides applied.
        """
        patch = {k: v for k, v in overrides.items() if v is not None}
        if not patch:
            return self
        return VerificationConfig.model_validate({**self.model_dump(), **patch})


# Instantiate global settings instance
settings = Settings()
