from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpflow.flow import model_for
from warpflow.manifold import (
    HyperbolicMapProblem,
    NonContraction,
    adapt_norm,
    fit_graph_coefficient,
    orbit_report,
    orbit_residual,
    solve_ancient_orbit,
    toy_problem,
    truncate_flow_map,
    unstable_graph,
    upsilon_map,
)
from warpflow.spectral import compute_spectrum


# ---------------------------------------------------------------------------
# problem validation


def test_problem_validation():
    with pytest.raises(ValueError, match="spectral radius"):
        HyperbolicMapProblem(1, 1, [[1.5]], [[2.0]], lambda z: 0 * z, 1.2)
    with pytest.raises(ValueError, match="multiplier"):
        HyperbolicMapProblem(1, 1, [[0.5]], [[1.1]], lambda z: 0 * z, 1.2)
    with pytest.raises(ValueError):
        HyperbolicMapProblem(1, 1, [[0.5]], [[2.0]], lambda z: 0 * z, -1.0)
    with pytest.raises(ValueError, match="unknown toy map"):
        toy_problem("cubic")


def test_solver_argument_checks():
    p = toy_problem("quadratic")
    with pytest.raises(ValueError):
        solve_ancient_orbit(p, [0.1, 0.2])
    with pytest.raises(ValueError):
        solve_ancient_orbit(p, 0.1, damping=0.0)
    with pytest.raises(ValueError):
        solve_ancient_orbit(p, 0.1, seed=np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# toy maps with known answers


@pytest.mark.parametrize("depth", [10, 20, 30, 40])
def test_quadratic_graph_coefficient(depth):
    p = toy_problem("quadratic")
    pairs, defects = unstable_graph(p, [0.02, 0.05, -0.1, 0.2], depth=depth)
    assert fit_graph_coefficient(pairs) == pytest.approx(2 / 7, abs=1e-10)
    for (v, x0), d in zip(pairs, defects):
        assert x0[0] == pytest.approx(2 * v[0] ** 2 / 7, abs=1e-12)
        assert d == pytest.approx(2 * abs(v[0]) / 7, rel=1e-9)


def test_linear_map_solved_exactly():
    p = toy_problem("linear")
    orbit = solve_ancient_orbit(p, 0.3, depth=15)
    expect = np.column_stack([np.zeros(16), 0.3 * 2.0 ** np.arange(-15, 1)])
    np.testing.assert_allclose(orbit.points, expect, atol=1e-16)
    assert orbit.residual == 0.0
    assert orbit.iterations <= 2


def test_zero_seed_gives_fixed_point():
    orbit = solve_ancient_orbit(toy_problem("coupled"), [0.0], depth=12)
    assert np.all(orbit.points == 0.0)
    assert orbit.weighted_norm == 0.0


def test_upsilon_vanishes_without_nonlinearity(rng):
    p = toy_problem("linear")
    X = 0.01 * rng.normal(size=(11, 2))
    assert np.all(upsilon_map(p, X) == 0.0)


def test_upsilon_is_quadratic(rng):
    p = toy_problem("coupled")
    X = rng.normal(size=(9, 3)) * (1 / math.sqrt(3)) ** np.arange(8, -1, -1)[:, None]
    y1 = upsilon_map(p, 1e-2 * X)
    y2 = upsilon_map(p, 5e-3 * X)
    ratio = np.max(np.abs(y1)) / np.max(np.abs(y2))
    assert 3.5 < ratio < 4.5


def test_orbit_is_unique_across_seeds(rng):
    p = toy_problem("coupled")
    ref = solve_ancient_orbit(p, [0.08], depth=20)
    for _ in range(3):
        seed = ref.points + 1e-3 * rng.normal(size=ref.points.shape) * math.sqrt(3) ** np.arange(-20, 1)[:, None]
        other = solve_ancient_orbit(p, [0.08], depth=20, seed=seed)
        np.testing.assert_allclose(other.points, ref.points, atol=1e-13)


def _wnorm(X, a):
    i = np.arange(-(X.shape[0] - 1), 1)
    return float(np.max(a ** (-i.astype(float)) * np.linalg.norm(X, axis=1)))


def test_contraction_improves_near_fixed_point(rng):
    p = toy_problem("coupled")
    lips = []
    for v in (0.2, 0.1, 0.05, 0.025):
        X = solve_ancient_orbit(p, [v], depth=20).points
        d = 1e-6 * v * rng.normal(size=X.shape) * p.a ** np.arange(-20, 1)[:, None]
        lips.append(_wnorm(upsilon_map(p, X + d) - upsilon_map(p, X), p.a) / _wnorm(d, p.a))
    # Lipschitz constant of the nonlinear part is O(|v|)
    assert all(a > b for a, b in zip(lips, lips[1:]))
    assert lips[0] / lips[-1] > 4
    assert lips[-1] < 0.1


def test_orbit_decays_geometrically():
    p = toy_problem("coupled")
    orbit = solve_ancient_orbit(p, [0.1], depth=25)
    nrm = np.linalg.norm(orbit.points, axis=1)
    i = orbit.indices
    assert np.all(nrm * p.a ** (-i.astype(float)) <= orbit.weighted_norm * (1 + 1e-12))
    assert orbit.weighted_norm == pytest.approx(np.max(nrm * p.a ** (-i.astype(float))))
    np.testing.assert_array_equal(orbit.point(0), orbit.x0)
    np.testing.assert_array_equal(orbit.point(-25), orbit.points[0])


def test_tangency_defect_shrinks_linearly():
    p = toy_problem("coupled")
    _, defects = unstable_graph(p, [[0.1], [0.05], [0.025], [0.0125]], depth=20)
    ratios = np.array(defects[:-1]) / np.array(defects[1:])
    np.testing.assert_allclose(ratios, 2.0, rtol=0.05)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.15, 0.15).filter(lambda v: abs(v) > 1e-4))
def test_coupled_orbit_is_invariant(v):
    p = toy_problem("coupled")
    orbit = solve_ancient_orbit(p, [v], depth=20)
    assert orbit.residual <= 1e-13
    # the previous point lies on the same graph
    prev = orbit.point(-1)
    again = solve_ancient_orbit(p, prev[2:], depth=20)
    np.testing.assert_allclose(again.x0, prev, atol=1e-13)


def test_large_data_rejected():
    with pytest.raises(NonContraction):
        solve_ancient_orbit(toy_problem("quadratic"), 5.0)


def test_adapted_norm_preserves_orbits():
    # non-normal stable block: spectral radius 0.5 but operator norm above a
    p = HyperbolicMapProblem(2, 1, [[0.5, 4.0], [0.0, 0.4]], [[3.0]],
                             lambda z: np.array([z[2] ** 2, z[0] * z[2], z[1] * z[2]]), 1.5)
    assert not p.is_adapted()
    q, S = adapt_norm(p)
    assert q.is_adapted()
    np.testing.assert_allclose(np.sort(np.abs(np.linalg.eigvals(q.T_s))), [0.4, 0.5], atol=1e-12)
    v = np.array([0.06])
    ref = solve_ancient_orbit(p, v, depth=20)
    got = solve_ancient_orbit(q, S[2:, 2:] @ v, depth=20)
    back = np.linalg.solve(S, got.points.T).T
    np.testing.assert_allclose(back, ref.points, atol=1e-13)


def test_orbit_report_contents():
    orbit = solve_ancient_orbit(toy_problem("quadratic"), 0.1, depth=8)
    rep = orbit_report(orbit)
    assert rep["depth"] == 8 and len(rep["points"]) == 9
    assert rep["v"] == [0.1]
    assert rep["residual"] == orbit_residual(toy_problem("quadratic"), orbit.points)


# ---------------------------------------------------------------------------
# truncated flow map


@pytest.fixture(scope="module")
def flow_problem(bohm22_small):
    model = model_for(bohm22_small)
    pairs = compute_spectrum(model.problem, 3)
    return truncate_flow_map(model, pairs, 3, dt=0.25), pairs


def test_truncated_flow_map_structure(flow_problem):
    p, pairs = flow_problem
    assert (p.dim_s, p.dim_u) == (2, 1)
    assert p.T_u[0, 0] == pytest.approx(math.exp(0.25 * pairs[0].lam))
    assert p.T_s[0, 0] < p.a < p.T_u[0, 0]
    assert np.all(p.g(np.zeros(3)) == 0.0)


def test_truncated_flow_map_nonlinearity_quadratic(flow_problem):
    p, _ = flow_problem
    c = np.array([0.0, 0.0, 1e-3])
    g1 = p.g(c)
    g2 = p.g(c / 2)
    assert np.linalg.norm(g1) / np.linalg.norm(g2) == pytest.approx(4.0, rel=0.05)


def test_truncation_argument_checks(bohm22_small):
    model = model_for(bohm22_small)
    pairs = compute_spectrum(model.problem, 3)
    with pytest.raises(ValueError):
        truncate_flow_map(model, pairs, 1, dt=0.25)
    with pytest.raises(ValueError):
        truncate_flow_map(model, pairs, 3, dt=0.25, a=10.0)
