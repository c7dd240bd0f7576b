# tests/test_bisim.py
import numpy as np
import pytest

from safehood.errors import BisimulationError
from safehood.models.automaton import Polytope
from safehood.verification.bisim import (
    build_metrics,
    check_bisimulation,
    dist_point_to_polytope,
    golden_section,
    min_dist_over_window,
    phi,
    solve_lyapunov,
)
from safehood.verification.geometry import MAX_ENUMERATED_ROWS, PolytopeProjector
from safehood.verification.simulate import flow, simulate

from conftest import model_from, spiral_doc


# ---------- Lyapunov ----------

def test_diagonal_lyapunov_closed_form():
    A = np.diag([-1.0, -2.0])
    M = solve_lyapunov(A)
    np.testing.assert_allclose(M, np.diag([0.5, 0.25]), atol=1e-12)
    np.testing.assert_allclose(A.T @ M + M @ A, -np.eye(2), atol=1e-12)


def test_general_lyapunov_residual():
    A = np.array([[-1.0, 2.0], [-3.0, -0.5]])
    M = solve_lyapunov(A, 2.0 * np.eye(2))
    np.testing.assert_allclose(A.T @ M + M @ A, -2.0 * np.eye(2), atol=1e-9)
    assert check_bisimulation(M, A)


def test_unstable_dynamics_rejected():
    with pytest.raises(BisimulationError, match="supply M manually"):
        solve_lyapunov(np.diag([1.0, -1.0]))


def test_check_bisimulation():
    A = np.diag([-1.0, -2.0])
    assert check_bisimulation(np.diag([0.5, 0.25]), A)
    assert not check_bisimulation(np.diag([0.5, -0.25]), A)
    assert not check_bisimulation(np.eye(2), np.diag([1.0, -1.0]))


def test_phi_never_grows_along_pairs_of_solutions(example):
    rng = np.random.default_rng(17)
    for H in (example, model_from(spiral_doc())):
        metrics = build_metrics(H)
        for loc in H.locations:
            M = metrics[loc.id].M
            assert np.max(np.linalg.eigvalsh(loc.A.T @ M + M @ loc.A)) <= 1e-9
            for _ in range(200):
                x, y = rng.normal(scale=2.0, size=(2, 2))
                t = rng.uniform(0.0, 2.0)
                assert phi(M, flow(loc, x, t), flow(loc, y, t)) <= phi(M, x, y) + 1e-9


def test_phi_is_a_metric_sample():
    M = np.diag([0.5, 0.25])
    x, y = np.array([1.0, 2.0]), np.array([0.0, 0.0])
    assert phi(M, x, x) == 0.0
    assert phi(M, x, y) == pytest.approx(np.sqrt(0.5 + 1.0))
    assert phi(M, x, y) == phi(M, y, x)


# ---------- Point to polytope ----------

def test_point_to_guard_closure():
    closure_g2 = Polytope(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]]), np.array([1.0, -1.0, -1.0]))
    res = dist_point_to_polytope(np.eye(2), np.array([1.25, 1.9]), closure_g2)
    assert res.value == pytest.approx(0.25, abs=1e-9)
    np.testing.assert_allclose(res.witness_point, [1.0, 1.9], atol=1e-9)


def test_point_inside_has_distance_zero():
    res = dist_point_to_polytope(np.eye(2), np.array([0.5, 0.5]), Polytope.box([0, 0], [1, 1]))
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_empty_polytope_is_infinitely_far():
    assert dist_point_to_polytope(np.eye(2), np.zeros(2), Polytope.empty_set(2)).value == np.inf


def _dense_triangle_distance(M, p, V, step=1e-4):
    """Brute force: 0 inside the triangle, else the closest of densely sampled edge points."""
    edges = [(V[i], V[(i + 1) % 3]) for i in range(3)]
    signs = [np.sign((b - a)[0] * (p - a)[1] - (b - a)[1] * (p - a)[0]) for a, b in edges]
    if all(s >= 0 for s in signs) or all(s <= 0 for s in signs):
        return 0.0
    s = np.arange(0.0, 1.0 + step, step)[:, None]
    pts = np.vstack([a + s * (b - a) for a, b in edges])
    D = pts - p
    return float(np.sqrt(np.min(np.einsum("ij,jk,ik->i", D, M, D))))


def test_point_distance_agrees_with_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        Q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        M = Q @ np.diag(rng.uniform(0.2, 2.0, size=2)) @ Q.T
        c = rng.uniform(-1.0, 1.0, size=2)
        # random triangle
        V = c + rng.uniform(-0.6, 0.6, size=(3, 2))
        if abs(np.linalg.det(np.column_stack([V[1] - V[0], V[2] - V[0]]))) < 0.05:
            continue
        rows, rhs = [], []
        centroid = V.mean(axis=0)
        for i in range(3):
            a, b = V[i], V[(i + 1) % 3]
            n = np.array([b[1] - a[1], a[0] - b[0]])
            if n @ (centroid - a) > 0:
                n = -n
            rows.append(n)
            rhs.append(n @ a)
        P = Polytope(np.array(rows), np.array(rhs))
        p = rng.uniform(-2.0, 2.0, size=2)
        got = dist_point_to_polytope(M, p, P).value
        assert got == pytest.approx(_dense_triangle_distance(M, p, V), abs=2e-3)


# ---------- Golden section ----------

def test_golden_section_brackets_minimum():
    c, d = golden_section(lambda t: (t - 0.3) ** 2, 0.0, 1.0, 1e-8)
    assert d - c <= 1e-8
    assert c - 1e-8 <= 0.3 <= d + 1e-8


def test_golden_section_on_short_interval():
    assert golden_section(lambda t: t, 0.2, 0.2 + 1e-12, 1e-9) == (0.2, 0.2 + 1e-12)


# ---------- Segment to polytope ----------

def test_segment_touches_the_guard_it_triggers(example, cfg, metrics):
    traj = simulate(example, "l3", np.array([1.25, 1.9]), 0.0, 0.5, cfg)
    seg = traj.segments[0]
    closure_g1 = example.events[0].guard
    res = min_dist_over_window(seg, (seg.t0, seg.t_end), closure_g1, metrics["l3"], cfg)
    assert res.value == pytest.approx(0.0, abs=1e-6)
    assert res.witness_time == pytest.approx(np.log(1.9) / 3.0, abs=1e-6)
    np.testing.assert_allclose(res.witness_point, [1.25 * 1.9 ** (-1.0 / 3.0), 1.0], atol=1e-5)


def test_segment_distance_agrees_with_dense_oracle(example, cfg, metrics):
    # l1 segment against the unsafe box, with the diagonal l1 metric
    traj = simulate(example, "l1", np.array([1.0092, 1.0]), 0.2, 0.5, cfg)
    seg = traj.segments[0]
    box = example.unsafe["l1"][0]
    res = min_dist_over_window(seg, (seg.t0, seg.t_end), box, metrics["l1"], cfg)
    ts = np.arange(seg.t0, seg.t_end, 1e-4)
    X = seg.states(ts)
    gap = np.maximum(np.array([1.2, 0.5]) - X, 0.0) + np.maximum(X - np.array([1.4, 0.9]), 0.0)
    oracle = np.sqrt(np.min(np.sum(np.array([0.5, 0.25]) * gap**2, axis=1)))
    assert res.value == pytest.approx(oracle, abs=2e-3)


def test_window_restricts_the_search(example, cfg, metrics):
    traj = simulate(example, "l3", np.array([1.25, 1.9]), 0.0, 0.5, cfg)
    seg = traj.segments[0]
    closure_g1 = example.events[0].guard
    early = min_dist_over_window(seg, (0.0, 0.05), closure_g1, metrics["l3"], cfg)
    assert early.value > 0.1
    assert min_dist_over_window(seg, (0.1, 0.05), closure_g1, metrics["l3"], cfg).value == np.inf


# ---------- Projector ----------

def _regular_polygon(k: int) -> Polytope:
    angles = 2.0 * np.pi * np.arange(k) / k
    return Polytope(np.column_stack([np.cos(angles), np.sin(angles)]), np.ones(k))


@pytest.mark.parametrize("sides", [MAX_ENUMERATED_ROWS, 12])
def test_projection_onto_regular_polygon(sides):
    proj = PolytopeProjector(np.eye(2), _regular_polygon(sides))
    assert proj._fallback == (sides > MAX_ENUMERATED_ROWS)
    y, sq = proj.project(np.array([[3.0, 0.0], [0.2, 0.1]]))
    # facet 0 has normal (1, 0) at distance 1 from the origin
    np.testing.assert_allclose(y[0], [1.0, 0.0], atol=1e-6)
    assert sq[0] == pytest.approx(4.0, abs=1e-6)
    assert sq[1] == pytest.approx(0.0, abs=1e-10)
