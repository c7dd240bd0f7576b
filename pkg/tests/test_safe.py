# tests/test_safe.py
import numpy as np
import pytest

from safehood.errors import PreconditionError
from safehood.models.trajectory import TerminalStatus
from safehood.verification.bisim import build_metrics
from safehood.verification.robust import NeighborhoodKind, robust_neighborhood
from safehood.verification.safe import (
    SafeNeighborhoodSolver,
    build_event_tree,
    critical_states,
    enlarged_reach,
    proximal_guards,
    proximal_state,
    safe_neighborhood,
    safe_neighborhood_basic,
)
from safehood.verification.simulate import simulate

from conftest import ball_samples, model_from, spiral_doc

X0 = np.array([1.25, 1.9])


@pytest.fixture(scope="module")
def robust_radii(example, cfg, metrics):
    traj = simulate(example, "l3", X0, 0.0, cfg.t_end, cfg)
    return robust_neighborhood(example, traj, metrics, cfg).radii


@pytest.fixture(scope="module")
def safe_result(example, cfg, metrics):
    return safe_neighborhood(example, "l3", X0, 0.0, cfg.t_end, metrics, cfg)


# ---------- Bundled example ----------

def test_radii_follow_the_triggered_chain(safe_result):
    assert [node.location for node in safe_result.chain] == ["l3", "l1"]
    assert len(safe_result.radii) == 2
    assert safe_result.root.triggered_event == "g1"
    assert safe_result.neighborhood.kind == NeighborhoodKind.SAFE


def test_last_location_radius_equals_robust(safe_result, robust_radii):
    assert safe_result.radii[1] == pytest.approx(robust_radii[1], rel=1e-9)


def test_safe_ball_enlarges_the_robust_ball(safe_result, robust_radii):
    assert robust_radii[0] > 0.0
    assert safe_result.radii[0] >= 5.0 * robust_radii[0]
    assert safe_result.root.robust_radius == pytest.approx(robust_radii[0], rel=1e-12)


def test_pivots_branch_into_both_targets(safe_result, cfg):
    root = safe_result.root
    assert root.pivots
    first = root.pivots[0]
    assert set(first.guards) == {"g1", "g2"}
    assert {node.location for node in first.branches.values()} == {"l1", "l2"}
    for lo, hi in first.window:
        assert hi - lo <= cfg.tau_maxlead + cfg.tau_maxlag + 1e-12
    # windows of distinct pivots never overlap
    spans = sorted(w for p in root.pivots for w in p.window)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 <= b0 + 1e-12


def test_event_tree_admits_real_and_virtual_sequences(safe_result):
    tree = build_event_tree(safe_result)
    assert tree.location == "l3"
    assert tree.admits(("g1",))
    assert tree.admits(("g2",))
    assert not tree.admits(("g1", "g2"))
    first = tree.children[0]
    assert (first.event_id, first.kind) == ("g1", "triggered")
    assert "virtual" in {edge.kind for edge in tree.children}
    assert tree.size() >= 3
    assert tree.to_dict()["children"][0]["event"] == "g1"


def test_solver_cache_returns_the_same_node(example, cfg, metrics):
    solver = SafeNeighborhoodSolver(example, metrics, cfg)
    a = solver.solve("l3", X0, 0.0, cfg.t_end)
    b = solver.solve("l3", X0 + 1e-12, 0.0, cfg.t_end)
    assert a.root is b.root


def test_zero_threshold_reduces_to_robust(example, cfg, metrics, robust_radii):
    robust_cfg = cfg.with_overrides(d_thr=0.0)
    result = safe_neighborhood(example, "l3", X0, 0.0, cfg.t_end, metrics, robust_cfg)
    assert result.radii == robust_radii
    assert not result.root.pivots


def test_zero_threshold_reduces_to_robust_on_coupled_dynamics():
    H = model_from(spiral_doc())
    m = build_metrics(H)
    cfg = H.config.with_overrides(d_thr=0.0)
    x0 = H.initial.center
    traj = simulate(H, "a", x0, 0.0, cfg.t_end, cfg)
    assert traj.status == TerminalStatus.HORIZON_REACHED
    robust = robust_neighborhood(H, traj, m, cfg).radii
    result = safe_neighborhood(H, "a", x0, 0.0, cfg.t_end, m, cfg)
    assert len(robust) == len(traj.segments) == 2
    assert result.radii == robust


def test_safe_ball_samples_stay_safe_and_follow_the_tree(example, cfg, safe_result):
    nb = safe_result.neighborhood
    tree = build_event_tree(safe_result)
    inv = example.location("l3").invariant
    rng = np.random.default_rng(2025)
    seen = set()
    for x in ball_samples(nb.center, nb.metric.M, nb.radius, 500, rng):
        assert inv.contains(x)
        sample = simulate(example, "l3", x, 0.0, cfg.t_end, cfg)
        assert sample.status != TerminalStatus.UNSAFE_HIT
        assert tree.admits(sample.event_sequence)
        seen.add(sample.event_sequence)
    assert ("g1",) in seen


def test_outside_invariant_rejected(example, cfg, metrics):
    with pytest.raises(PreconditionError):
        safe_neighborhood(example, "l3", np.array([0.5, 0.5]), 0.0, cfg.t_end, metrics, cfg)


# ---------- Guard-critical separation ----------

def test_safe_radius_positive_where_robust_is_zero(example, cfg, metrics, corner_state):
    traj = simulate(example, "l3", corner_state, 0.0, cfg.t_end, cfg)
    robust = robust_neighborhood(example, traj, metrics, cfg)
    safe = safe_neighborhood(example, "l3", corner_state, 0.0, cfg.t_end, metrics, cfg)
    assert robust.radii[0] <= 1e-6
    assert safe.radii[0] > 0.0


def test_unsafe_branch_gets_radius_zero_without_failing(example_doc, cfg):
    # make l2 unsafe right where a g2 branch from the bundled start lands
    example_doc["unsafe"][1] = {
        "location": "l2",
        "H": [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
        "h": [1.05, -0.9, 1.2, -0.8],
    }
    H = model_from(example_doc)
    m = build_metrics(H)
    result = safe_neighborhood(H, "l3", X0, 0.0, H.config.t_end, m, H.config)
    branches = [n for p in result.root.pivots for e, n in p.branches.items() if e == "g2"]
    assert any(n.neighborhood.radius == 0.0 for n in branches)
    assert any("enters the unsafe set" in d for d in result.diagnostics)


# ---------- Proximity helpers ----------

def test_proximal_guards_and_states(example, cfg, metrics, safe_result):
    seg = safe_result.root.segment
    t_event = seg.t_end
    near = proximal_guards(example, seg, t_event, 0.1, metrics["l3"])
    assert {e.id for e in near} == {"g1", "g2"}
    assert proximal_guards(example, seg, 0.0, 0.1, metrics["l3"]) == []
    y = proximal_state(seg, t_event, example.active_guards[1], metrics["l3"])
    np.testing.assert_allclose(y, [1.0, 1.0], atol=1e-6)


# ---------- Single-guard case ----------

def _single_guard_doc(example_doc):
    example_doc["events"] = example_doc["events"][:1]
    example_doc["unsafe"] = example_doc["unsafe"][:1]
    return example_doc


def test_basic_solver_on_single_guard(example_doc):
    H = model_from(_single_guard_doc(example_doc))
    m = build_metrics(H)
    result = safe_neighborhood_basic(H, "l3", X0, 0.0, H.config.t_end, m, H.config)
    assert result.neighborhood.radius > 0.0
    (pivot,) = result.root.pivots
    assert pivot.branches["g1"].location == "l1"
    assert pivot.t_pivot == pytest.approx(np.log(1.9) / 3.0, abs=1e-6)


def test_basic_solver_keeps_an_unsimulable_branch_at_radius_zero(example_doc):
    doc = _single_guard_doc(example_doc)
    # g1 now lifts x2 by 0.5, out of an l1 invariant capped at x2 <= 1.2
    doc["events"][0]["reset"] = {"R": [[1.0, 0.0], [0.0, 1.0]], "s": [0.0, 0.5]}
    doc["locations"][0]["invariant"] = {"H": [[0.0, 1.0]], "h": [1.2]}
    H = model_from(doc)
    m = build_metrics(H)
    # the horizon ends just before x2 reaches 1, so only the branch crosses g1
    result = safe_neighborhood_basic(H, "l3", X0, 0.0, 0.2, m, H.config)
    assert result.root.trajectory.event_sequence == ()
    (pivot,) = result.root.pivots
    branch = pivot.branches["g1"]
    assert branch.trajectory is None
    assert branch.neighborhood.radius == 0.0
    assert any("could not be simulated" in d for d in result.diagnostics)
    assert result.neighborhood.radius > 0.0


def test_basic_solver_rejects_other_structures(example, cfg, metrics):
    with pytest.raises(PreconditionError):
        safe_neighborhood_basic(example, "l3", X0, 0.0, cfg.t_end, metrics, cfg)


# ---------- Enlarged reach ----------

def test_bundled_reach_has_no_branches(example, cfg, metrics):
    reach = enlarged_reach(example, X0, 0.0, cfg.t_end, metrics, cfg)
    assert reach.root.event_sequence == ("g1",)
    assert reach.branches == ()
    assert not reach.reaches_unsafe
    assert critical_states(example, reach.root, metrics, cfg) == []



def test_corner_touch_of_g2_branches_into_l2(example, cfg, metrics, corner_state):
    reach = enlarged_reach(example, corner_state, 0.0, cfg.t_end, metrics, cfg)
    assert reach.root.event_sequence == ("g1",)
    (branch,) = reach.branches
    assert (branch.event_id, branch.parent, branch.depth) == ("g2", 0, 1)
    assert branch.trajectory.initial_location == "l2"
    assert branch.time == pytest.approx(reach.root.events[0].time, abs=1e-5)
    np.testing.assert_allclose(branch.point, [1.0, 1.0], atol=1e-4)
    assert not reach.reaches_unsafe


def test_safe_enlarged_reach_bounds_nearby_starts(example, cfg, metrics, corner_state):
    reach = enlarged_reach(example, corner_state, 0.0, cfg.t_end, metrics, cfg)
    assert not reach.reaches_unsafe
    admitted = {reach.root.event_sequence} | {(b.event_id,) for b in reach.branches}
    rng = np.random.default_rng(7)
    seen = set()
    for dx in rng.uniform(-1e-3, 1e-3, size=(200, 2)):
        sample = simulate(example, "l3", corner_state + dx, 0.0, cfg.t_end, cfg)
        assert sample.status != TerminalStatus.UNSAFE_HIT
        assert sample.event_sequence in admitted
        seen.add(sample.event_sequence)
    assert seen == {("g1",), ("g2",)}


def test_unsafe_l2_branch_is_reported_by_enlarged_reach(example_doc, corner_state):
    example_doc["unsafe"][1] = {
        "location": "l2",
        "H": [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
        "h": [1.05, -0.9, 1.05, -0.9],
    }
    H = model_from(example_doc)
    m = build_metrics(H)
    cfg = H.config
    reach = enlarged_reach(H, corner_state, 0.0, cfg.t_end, m, cfg)
    assert reach.root.status == TerminalStatus.HORIZON_REACHED
    (branch,) = reach.branches
    assert branch.trajectory.status == TerminalStatus.UNSAFE_HIT
    assert reach.reaches_unsafe
    # a start just left of the corner really takes g2 into the unsafe box
    neighbour = simulate(H, "l3", corner_state - np.array([1e-4, 0.0]), 0.0, cfg.t_end, cfg)
    assert neighbour.event_sequence == ("g2",)
    assert neighbour.status == TerminalStatus.UNSAFE_HIT
