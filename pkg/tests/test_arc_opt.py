import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from microgrid_decomp.arc_opt import ResourceInfeasible, arc_cost, solve_arc_price, solve_arc_resource
from microgrid_decomp.network import NetworkTopology, make_topology, project_onto_image


def costs(A, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 0.5, A), rng.uniform(-0.05, 0.05, A), rng.uniform(0, 0.1, A)


def test_unforced_arcs():
    C = make_topology(4, 0).incidence.astype(float)
    c0 = np.array([0.1, 0.2, 0.3, 0.4])[: C.shape[1]]
    sol = solve_arc_price(np.ones(C.shape[1]), 0.0, c0, np.zeros((1, 4)), C)
    np.testing.assert_array_equal(sol.q, 0.0)
    assert sol.value == pytest.approx(c0.sum())


def test_scalar_price_example():
    # one arc 1 -> 2, C^T p = p2 - p1 = 2: q = -1, value = 1 - 2 + c0
    C = np.array([[-1.0], [1.0]])
    sol = solve_arc_price(1.0, 0.0, 0.3, np.array([[0.0, 2.0]]), C)
    assert sol.q[0, 0] == pytest.approx(-1.0)
    assert sol.value == pytest.approx(0.3 - 1.0)


@given(seed=st.integers(0, 1000))
def test_price_solution_beats_sampled_flows(seed):
    topo = make_topology(5, seed)
    C = topo.incidence.astype(float)
    c2, c1, c0 = costs(topo.n_arcs, seed)
    p = np.random.default_rng(seed).normal(0, 0.2, (2, 5))
    sol = solve_arc_price(c2, c1, c0, p, C)
    trial = sol.q[None] + np.random.default_rng(seed + 1).normal(0, 0.5, (50, 2, topo.n_arcs))
    g = p @ C
    vals = (arc_cost(trial, c2, c1, c0) + g * trial).sum(axis=(1, 2))
    assert np.all(sol.value <= vals + 1e-10)


def test_two_node_resource_example():
    # C = (-1, 1)^T and C q = -r with r = (-1, 1) gives q = -1
    C = np.array([[-1.0], [1.0]])
    sol = solve_arc_resource(1.0, 0.0, 0.25, np.array([[-1.0, 1.0]]), C)
    assert sol.q[0, 0] == pytest.approx(-1.0)
    assert sol.value == pytest.approx(1.25)


def test_tree_zero_resource_zero_flow():
    topo = NetworkTopology.from_lists([1, 2, 3, 4], [(1, 2), (2, 3), (2, 4)])
    sol = solve_arc_resource(np.ones(3), 0.0, 0.0, np.zeros((1, 4)), topo.incidence.astype(float))
    np.testing.assert_allclose(sol.q, 0.0, atol=1e-14)


def test_unbalanced_resource_rejected():
    C = make_topology(3, 0).incidence.astype(float)
    with pytest.raises(ResourceInfeasible):
        solve_arc_resource(np.ones(3), 0.0, 0.0, np.array([[1.0, 0.0, 0.0]]), C)


@given(n=st.integers(2, 9), seed=st.integers(0, 1000))
def test_resource_solution_against_cvxpy(n, seed):
    topo = make_topology(n, seed)
    C = topo.incidence.astype(float)
    c2, c1, c0 = costs(topo.n_arcs, seed)
    r = project_onto_image(np.random.default_rng(seed).normal(0, 2, (1, n)), topo)
    sol = solve_arc_resource(c2, c1, c0, r, C)
    assert np.abs(C @ sol.q[0] + r[0]).max() <= 1e-9
    assert abs(sol.xi.sum()) <= 1e-9
    q = cp.Variable(topo.n_arcs)
    prob = cp.Problem(cp.Minimize(c2 @ cp.square(q) + c1 @ q + c0.sum()), [C @ q == -r[0]])
    prob.solve(solver=cp.CLARABEL)
    assert sol.value == pytest.approx(prob.value, abs=1e-7)


@given(seed=st.integers(0, 1000))
def test_xi_is_resource_gradient(seed):
    topo = make_topology(6, seed)
    C = topo.incidence.astype(float)
    c2, c1, c0 = costs(topo.n_arcs, seed)
    r = project_onto_image(np.random.default_rng(seed).normal(0, 2, (1, 6)), topo)
    sol = solve_arc_resource(c2, c1, c0, r, C)
    eps = 1e-4
    for i in range(6):
        for j in range(6):
            if i == j:
                continue
            e = np.zeros((1, 6))
            e[0, i], e[0, j] = 1.0, -1.0        # stay in im(C)
            up = solve_arc_resource(c2, c1, c0, r + eps * e, C).value
            dn = solve_arc_resource(c2, c1, c0, r - eps * e, C).value
            assert abs((up - dn) / (2 * eps) - (sol.xi[0, i] - sol.xi[0, j])) <= 1e-5


@given(seed=st.integers(0, 1000))
def test_resource_value_convex(seed):
    topo = make_topology(5, seed)
    C = topo.incidence.astype(float)
    c2, c1, c0 = costs(topo.n_arcs, seed)
    rng = np.random.default_rng(seed)
    r1, r2 = (project_onto_image(rng.normal(0, 2, (1, 5)), topo) for _ in range(2))
    v = lambda r: solve_arc_resource(c2, c1, c0, r, C).value
    assert v(0.5 * (r1 + r2)) <= 0.5 * (v(r1) + v(r2)) + 1e-12


@given(seed=st.integers(0, 1000))
def test_price_resource_duality_on_trees(seed):
    topo = make_topology(5, seed, n_arcs=4)
    C = topo.incidence.astype(float)
    c2, c1, c0 = costs(4, seed)
    p = np.random.default_rng(seed).normal(0, 0.3, (1, 5))
    ps = solve_arc_price(c2, c1, c0, p, C)
    rs = solve_arc_resource(c2, c1, c0, -(ps.q @ C.T), C)
    np.testing.assert_allclose(rs.q, ps.q, atol=1e-10)
    np.testing.assert_allclose(rs.xi, project_onto_image(p, topo), atol=1e-8)


def test_stage_varying_coefficients():
    topo = make_topology(3, 1)
    C = topo.incidence.astype(float)
    c2 = np.array([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1], [0.1, 0.2, 0.3]])
    r = project_onto_image(np.random.default_rng(0).normal(size=(3, 3)), topo)
    sol = solve_arc_resource(c2, 0.0, 0.0, r, C)
    for t in range(3):
        one = solve_arc_resource(c2[t], 0.0, 0.0, r[t:t + 1], C)
        np.testing.assert_allclose(sol.q[t], one.q[0], atol=1e-13)
