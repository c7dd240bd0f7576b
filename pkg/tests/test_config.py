# tests/test_config.py
import pytest
from pydantic import ValidationError

from safehood.config import Settings, VerificationConfig


def test_verification_defaults():
    cfg = VerificationConfig()
    assert cfg.d_thr is None
    assert cfg.threshold == 0.0
    assert (cfg.tau_maxlead, cfg.tau_maxlag, cfg.alpha, cfg.t_end) == (0.1, 0.1, 0.9, 0.5)
    assert cfg.time_grid_dt == 0.005


@pytest.mark.parametrize("field,value", [("alpha", 1.0), ("alpha", 0.0), ("tau_maxlag", -0.1), ("dist_tol", 0.0)])
def test_out_of_range_values_rejected(field, value):
    with pytest.raises(ValidationError):
        VerificationConfig(**{field: value})


def test_event_tol_must_be_below_grid_step():
    with pytest.raises(ValidationError):
        VerificationConfig(event_tol=0.01, time_grid_dt=0.005)


def test_unknown_field_rejected():
    with pytest.raises(ValidationError):
        VerificationConfig(sim_time=1.0)


def test_with_overrides_skips_none_and_revalidates():
    cfg = VerificationConfig(d_thr=0.1)
    same = cfg.with_overrides(alpha=None, t_end=None)
    assert same is cfg
    changed = cfg.with_overrides(t_end=1.0)
    assert changed.t_end == 1.0 and changed.d_thr == 0.1
    with pytest.raises(ValidationError):
        cfg.with_overrides(alpha=2.0)


def test_settings_read_environment(monkeypatch):
    monkeypatch.setenv("SAFEHOOD_THREADS", "3")
    monkeypatch.setenv("SAFEHOOD_LOG_LEVEL", "DEBUG")
    s = Settings()
    assert s.threads == 3
    assert s.log_level == "DEBUG"


def test_settings_threads_positive(monkeypatch):
    monkeypatch.setenv("SAFEHOOD_THREADS", "0")
    with pytest.raises(ValidationError):
        Settings()
