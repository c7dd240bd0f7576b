# tests/test_robust.py
import numpy as np
import pytest

from safehood.errors import PreconditionError
from safehood.models.automaton import AffineMap, EventDef, Polytope
from safehood.models.trajectory import TerminalStatus
from safehood.verification.bisim import QuadraticBisimFunction, build_metrics
from safehood.verification.robust import (
    Criticality,
    Neighborhood,
    NeighborhoodKind,
    allowed_guard_part,
    assemble_avoided_set,
    classify_trajectory,
    robust_neighborhood,
    robust_radius_raw,
    shrinking,
)
from safehood.verification.simulate import simulate

from conftest import ball_samples, box_distance, model_from

UNSAFE_LO = np.array([1.2, 0.5])
UNSAFE_HI = np.array([1.4, 0.9])


@pytest.fixture(scope="module")
def bundled_run(example, cfg, metrics):
    traj = simulate(example, "l3", np.array([1.25, 1.9]), 0.0, cfg.t_end, cfg)
    return traj, robust_neighborhood(example, traj, metrics, cfg)


def test_one_radius_per_location(bundled_run):
    traj, result = bundled_run
    assert len(result.radii) == 2
    assert [nb.location for nb in result.neighborhoods] == ["l3", "l1"]
    assert all(r > 0.0 for r in result.radii)
    assert result.certificate is result.neighborhoods[0]
    assert result.certificate.kind == NeighborhoodKind.ROBUST
    np.testing.assert_array_equal(result.certificate.center, [1.25, 1.9])


def test_last_location_radius_matches_dense_oracle(bundled_run):
    traj, result = bundled_run
    seg = traj.segments[1]
    ts = np.arange(seg.t0, seg.t_end, 1e-4)
    oracle = box_distance(np.array([0.5, 0.25]), seg.states(ts), UNSAFE_LO, UNSAFE_HI).min()
    assert result.radii[1] == pytest.approx(oracle, abs=2e-3)
    assert result.neighborhoods[1].bottleneck.kind == "unsafe"


def test_first_radius_below_gap_to_g2(bundled_run):
    traj, result = bundled_run
    # the exit point sits 1.25 * 1.9^(-1/3) - 1 away from g2 in x1; M(l3)_11 = 1/2
    gap = np.sqrt(0.5) * (1.25 * 1.9 ** (-1.0 / 3.0) - 1.0)
    assert 0.0 < result.radii[0] <= gap + 1e-9
    assert result.radii[0] < result.radii[1]


def test_noncritical_classification(bundled_run, cfg):
    traj, result = bundled_run
    assert classify_trajectory(traj, result.neighborhoods, cfg).label == Criticality.NONCRITICAL


def test_neighborhood_is_an_open_ball(metrics):
    nb = Neighborhood("l1", np.array([1.0, 1.0]), 0.1, metrics["l1"])
    assert nb.contains(np.array([1.0, 1.0]))
    assert nb.contains(np.array([1.1, 1.0]))  # phi = 0.0707
    assert not nb.contains(np.array([1.15, 1.0]))  # phi = 0.1061


def test_guard_critical_trajectory(example, cfg, metrics, corner_state):
    traj = simulate(example, "l3", corner_state, 0.0, cfg.t_end, cfg)
    result = robust_neighborhood(example, traj, metrics, cfg)
    assert result.radii[0] <= 1e-6
    label = classify_trajectory(traj, result.neighborhoods, cfg)
    assert label.label == Criticality.GUARD_CRITICAL
    assert label.bottleneck.kind == "guard"


def test_unsafe_hit_is_unsafe_critical(example, cfg, metrics):
    traj = simulate(example, "l1", np.array([1.5, 0.7]), 0.0, cfg.t_end, cfg)
    assert classify_trajectory(traj, [], cfg).label == Criticality.UNSAFE_CRITICAL
    with pytest.raises(PreconditionError):
        robust_neighborhood(example, traj, metrics, cfg)


def test_neighborhood_without_avoided_set_is_capped(example_doc, cfg):
    example_doc["unsafe"] = []
    H = model_from(example_doc)
    traj = simulate(H, "l1", np.array([1.0, 1.0]), 0.0, 0.5, H.config)
    result = robust_neighborhood(H, traj, build_metrics(H), H.config)
    assert result.radii == [H.config.radius_cap]


# ---------- Allowed part ----------

def _identity_g1(example):
    return example.events[0]


def test_allowed_part_is_the_guard_line_inside_the_ball(example):
    event = _identity_g1(example)
    eye = np.eye(2)
    nb = Neighborhood("l1", np.array([1.0092, 1.0]), 0.1613, QuadraticBisimFunction("l1", eye))
    part = allowed_guard_part(event, nb)
    assert not part.is_empty
    assert part.contains(np.array([1.0092, 1.0]))
    assert part.contains(np.array([1.16, 1.0]))
    assert not part.contains(np.array([1.18, 1.0]))
    # below x1 = 1 the guard itself ends
    assert not part.contains(np.array([0.95, 1.0]))


def test_allowed_part_empty_for_zero_or_distant_ball(example, metrics):
    event = _identity_g1(example)
    assert allowed_guard_part(event, Neighborhood("l1", np.array([1.0, 1.0]), 0.0, metrics["l1"])).is_empty
    far = Neighborhood("l1", np.array([1.0, 3.0]), 0.5, metrics["l1"])
    assert allowed_guard_part(event, far).is_empty


def test_allowed_part_under_singular_reset(metrics):
    # reset collapses x2; the preimage of a ball is a vertical strip
    guard = Polytope(np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]]), np.array([1.0, -1.0, -1.0]))
    event = EventDef(0, "g", "l3", "l1", guard, 1, AffineMap(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2)))
    nb = Neighborhood("l1", np.array([1.5, 0.0]), 0.2, metrics["l1"])
    part = allowed_guard_part(event, nb)
    assert not part.is_empty
    assert part.contains(np.array([1.5, 1.0]))


# ---------- Avoided set and shrinking ----------

def test_avoided_sets(example):
    l3 = assemble_avoided_set(example, "l3")
    assert l3.unsafe == ()
    assert [e.id for e, _ in l3.guards] == ["g1", "g2"]
    l1 = assemble_avoided_set(example, "l1")
    assert l1.guards == () and len(l1.unsafe) == 1
    assert not assemble_avoided_set(example, "l2").is_empty


def test_shrinking_never_grows_the_radius(example, cfg, metrics, bundled_run):
    traj, _ = bundled_run
    seg = traj.segments[0]
    avoided = assemble_avoided_set(example, "l3")
    gamma, _ = robust_radius_raw(seg, avoided, metrics["l3"], cfg)
    shrunk = shrinking(gamma, seg, avoided, (), metrics["l3"], example.location("l3").invariant, cfg)
    assert 0.0 <= shrunk.radius <= gamma
    assert 0.0 <= shrunk.tau_lag <= cfg.tau_maxlag + 1e-12
    assert shrinking(0.0, seg, avoided, (), metrics["l3"], example.location("l3").invariant, cfg).radius == 0.0


def test_shrinking_on_random_segments(example, cfg, metrics):
    rng = np.random.default_rng(5)
    metric = metrics["l3"]
    inv = example.location("l3").invariant
    for _ in range(50):
        x2 = rng.uniform(1.05, 2.6)
        # keeps the g1 trigger point below x1 = 1.15, clear of the l1 unsafe box
        x1 = rng.uniform(1.02, 1.15 * x2 ** (1.0 / 3.0))
        traj = simulate(example, "l3", np.array([x1, x2]), 0.0, cfg.t_end, cfg)
        seg = traj.segments[0]
        assert seg.exit is not None
        avoided = robust_neighborhood(example, traj, metrics, cfg).avoided[0]
        raw, _ = robust_radius_raw(seg, avoided, metric, cfg)
        assert shrinking(0.0, seg, avoided, (), metric, inv, cfg).radius == 0.0
        for gamma in (raw, rng.uniform(0.0, 0.3)):
            out = shrinking(gamma, seg, avoided, (), metric, inv, cfg)
            assert 0.0 <= out.radius <= gamma
            assert out.gamma_tilde >= out.radius


# ---------- Sampling the robust ball ----------

def test_robust_ball_samples_replicate_the_event_sequence(example, cfg, bundled_run):
    traj, result = bundled_run
    nb = result.neighborhoods[0]
    assert nb.radius > 0.0
    t_event = traj.events[0].time
    rng = np.random.default_rng(2024)
    for x in ball_samples(nb.center, nb.metric.M, nb.radius, 500, rng):
        sample = simulate(example, "l3", x, 0.0, cfg.t_end, cfg)
        assert sample.status == TerminalStatus.HORIZON_REACHED
        assert sample.event_sequence == ("g1",)
        assert abs(sample.events[0].time - t_event) <= cfg.tau_maxlead
