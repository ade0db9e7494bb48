import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from microgrid_decomp import kernels
from microgrid_decomp.devices import NodeModel, battery_next, tank_next, terminal_cost
from microgrid_decomp.nodal_dp import (
    SENTINEL, NodeSolver, ValueGrid, backward_price, backward_resource, eval_value, price_exchange,
    rollout)

LATTICE = dict(alpha_b=1.0, alpha_h=1.0, beta_h=1.0, rho_c=1.0, rho_d=1.0, b_max=2.0, u_b_max=2.0,
               h_max=2.0, u_t_max=2.0, delta_t=0.5, u_ne_cap=20.0, kappa=1.0, h_ref=1.5,
               u_b_grid=(-2.0, -1.0, 0.0, 1.0, 2.0), u_t_grid=(0.0, 1.0, 2.0))


def lattice_solver(has_battery, d_hw, d_el, prob, price, resale=True, **kw):
    m = NodeModel(has_battery=has_battery, **{**LATTICE, **kw})
    return NodeSolver(m, d_hw, d_el, prob, price, points=5, resale=resale)


def random_node(seed, battery=True, T=3, K=2, points=7, controls=5, resale=True):
    rng = np.random.default_rng(seed)
    m = NodeModel(has_battery=battery, n_controls=controls, delta_t=0.5, h_max=4.0, h_ref=2.0,
                  u_t_max=3.0, b_max=3.0)
    prob = rng.uniform(0.2, 1.0, (T, K))
    prob /= prob.sum(axis=1, keepdims=True)
    return NodeSolver(m, rng.uniform(0, 1.5, (T, K)), rng.normal(0.5, 0.8, (T, K)), prob,
                      rng.uniform(0.02, 0.06, T), points=points, resale=resale)


def test_hand_evaluated_single_stage():
    # u_t = 0, 1, 2 cost 0.2 (0.5 + u_t) + kappa max(0, 1.5 - h') with h' = 0.5, 1.0, 1.5
    s = lattice_solver(False, [[1.0]], [[0.5]], [[1.0]], [0.2])
    g = s.backward("price", np.array([-0.2]))
    assert eval_value(g, 0, 1.0) == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("resale", [True, False])
@pytest.mark.parametrize("p", [-0.3, -0.1, 0.0, 0.05])
def test_single_bellman_step_matches_enumeration(resale, p):
    d_hw, d_el, prob = [[0.0, 1.0]], [[0.4, -0.7]], [[0.3, 0.7]]
    price = 0.15
    s = lattice_solver(True, d_hw, d_el, prob, [price], resale=resale)
    g = s.backward("price", np.array([p]))
    m = s.m
    u_ne = np.linspace(-m.u_ne_cap, m.u_ne_cap, 4001)
    phi = price * (u_ne if resale else np.maximum(u_ne, 0.0))
    ex = float((phi + p * u_ne).min())
    for b0, h0 in itertools.product(s.b_axis, s.h_axis):
        expect = 0.0
        for k in range(2):
            best = np.inf
            for ub, ut in itertools.product(m.u_b_values(), m.u_t_values()):
                b1 = float(battery_next(b0, ub, m))
                h1 = float(tank_next(h0, ut, d_hw[0][k], m))
                if not (-1e-12 <= b1 <= 2 + 1e-12 and -1e-12 <= h1 <= 2 + 1e-12):
                    continue
                v = ex - p * (d_el[0][k] + ub + ut) + float(terminal_cost(h1, m))
                best = min(best, v)
            expect += prob[0][k] * best
        assert eval_value(g, 0, (b0, h0)) == pytest.approx(expect, abs=1e-12)


def test_cost_free_world_is_zero():
    s = lattice_solver(True, np.zeros((3, 1)), np.zeros((3, 1)), np.ones((3, 1)), np.zeros(3))
    g = s.backward("price", np.zeros(3))
    assert eval_value(g, 0, (1.0, 1.5)) == 0.0
    gr = s.backward("resource", np.zeros(3))
    assert eval_value(gr, 0, (1.0, 1.5)) == 0.0
    # shortfall propagated from a low start: one stage of full heating lifts h by 1
    assert eval_value(g, 2, (0.0, 0.0)) == pytest.approx(0.5)


def test_price_shift_with_frozen_controls():
    # single control values: only the coordination term moves with p
    T = 3
    d_el = -np.array([[0.6], [1.0], [0.4]])
    s = lattice_solver(False, np.zeros((T, 1)), d_el, np.ones((T, 1)), np.full(T, 0.1),
                       resale=False, u_t_grid=(0.0,))
    p = np.full(T, -0.06)
    v0 = eval_value(s.backward("price", p), 0, 1.5)
    delta = 0.01
    v1 = eval_value(s.backward("price", p + delta), 0, 1.5)
    # u_ne stays 0 for p in [-price, 0], so Delta = -d_el > 0 at every stage
    assert price_exchange(p[0] + delta, 0.1, 20.0, False)[0] == 0.0
    assert v1 - v0 == pytest.approx(delta * float(-d_el.sum()), abs=1e-12)


def test_battery_less_node_grid_collapses():
    s = lattice_solver(False, [[0.0]], [[0.0]], [[1.0]], [0.1])
    g = s.backward("resource", np.array([0.0]))
    assert g.values.shape == (2, 1, 5)
    assert len(s.ub) == 1


def test_resource_cost_grows_with_export():
    s = lattice_solver(False, np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 1)), np.full(2, 0.1),
                       resale=False)
    vals = [eval_value(s.backward("resource", np.full(2, r)), 0, 1.5) for r in (0.0, 2.0, 5.0, 10.0)]
    assert np.all(np.diff(vals) > 0)
    with pytest.warns(RuntimeWarning):
        g = s.backward("resource", np.full(2, 25.0))   # beyond the exchange capacity
    assert np.isinf(g.values[0]).all() and g.infeasible


def test_price_and_resource_operands_agree():
    s = random_node(1)
    p = -0.05
    cp_ = s.cost_table(0, "price", p)
    for r in (-2.0, 0.0, 1.3):
        cr = s.cost_table(0, "resource", r)
        assert np.all(cp_ <= cr + p * r + 1e-12)
    u_star, _ = price_exchange(p, s.price[0], s.m.u_ne_cap, s.resale)
    r_star = u_star - s.base[0]
    cr = np.where(np.abs(u_star) <= s.m.u_ne_cap, s.price[0] * u_star, np.inf)
    np.testing.assert_allclose(cp_, cr + p * r_star, atol=1e-12)


@given(seed=st.integers(0, 200), lam=st.floats(0.0, 1.0))
def test_price_value_is_concave(seed, lam):
    s = random_node(seed, T=2, K=2, points=5, controls=3)
    rng = np.random.default_rng(seed + 1)
    p1, p2 = rng.uniform(-0.1, 0.05, (2, 2))
    x0 = (1.0, 2.0)
    v = lambda p: eval_value(s.backward("price", p), 0, x0)
    assert v(lam * p1 + (1 - lam) * p2) >= lam * v(p1) + (1 - lam) * v(p2) - 1e-9


def test_control_refinement_never_increases_value():
    base = random_node(3, controls=5)
    fine = random_node(3, controls=9)       # contains the 5-point grid
    p = -base.price
    v5 = eval_value(base.backward("price", p), 0, (1.5, 2.0))
    v9 = eval_value(fine.backward("price", p), 0, (1.5, 2.0))
    assert v9 <= v5 + 1e-12


@given(seed=st.integers(0, 300), battery=st.booleans(), resale=st.booleans())
def test_backends_identical(seed, battery, resale):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernel not built")
    s = random_node(seed, battery=battery, resale=resale)
    p = -s.price * np.random.default_rng(seed).uniform(0.5, 1.5, s.T)
    ref = s.backward("price", p).values
    s.kernel = kernels.get_backend("numpy")
    np.testing.assert_array_equal(s.backward("price", p).values, ref)


def test_eval_value_interpolation():
    m = NodeModel(has_battery=True, b_max=2.0, h_max=4.0)
    b_ax, h_ax = np.linspace(0, 2, 3), np.linspace(0, 4, 5)
    V = np.arange(15, dtype=float).reshape(1, 3, 5) ** 1.5
    g = ValueGrid(m, b_ax, h_ax, V, "price", np.zeros(0))
    assert eval_value(g, 0, (1.0, 3.0)) == V[0, 1, 3]
    assert eval_value(g, 0, (0.5, 3.0)) == pytest.approx(0.5 * (V[0, 0, 3] + V[0, 1, 3]))
    val, clamped = eval_value(g, 0, (2.5, 3.0), return_flag=True)
    assert clamped and val == V[0, 2, 3]
    with pytest.raises(ValueError):
        eval_value(g, 0, (2.5, 3.0), clamp=False)
    const = ValueGrid(m, b_ax, h_ax, np.full((1, 3, 5), 7.0), "price", np.zeros(0))
    assert eval_value(const, 0, (0.37, 1.91)) == pytest.approx(7.0)


def test_infinite_values_and_sentinel():
    m = NodeModel(has_battery=False, h_max=4.0)
    V = np.array([[[np.inf, 1.0, 2.0, 3.0, 4.0]]])
    g = ValueGrid(m, np.zeros(1), np.linspace(0, 4, 5), V, "price", np.zeros(0))
    assert eval_value(g, 0, 0.0) == np.inf
    assert eval_value(g, 0, 0.5) == pytest.approx(0.5 * SENTINEL + 0.5)


def test_process_length_checked():
    s = random_node(0)
    with pytest.raises(ValueError):
        s.backward("price", np.zeros(s.T + 1))


def test_wrappers_and_rollout():
    s = random_node(4, T=2)
    p = -s.price
    g = backward_price(s, p)
    np.testing.assert_array_equal(g.values, s.backward("price", p).values)
    gr = backward_resource(s, np.zeros(s.T))
    assert gr.mode == "resource"
    exact = rollout(s, g, (1.0, 2.0))
    mc = rollout(s, g, (1.0, 2.0), mc_samples=4000, force_mc=True)
    assert exact.exact and not mc.exact
    assert np.all(np.abs(mc.delta - exact.delta) <= 4 * mc.delta_se + 1e-12)


def test_exact_rollout_cost_on_lattice():
    # on a lattice node the policy never leaves the grid, so its expected cost is V_0
    rng = np.random.default_rng(5)
    prob = np.array([[0.4, 0.6]] * 3)
    s = lattice_solver(True, rng.integers(0, 3, (3, 2)).astype(float), rng.normal(0, 1, (3, 2)), prob,
                       np.full(3, 0.1))
    g = s.backward("price", np.full(3, -0.08))
    ro = rollout(s, g, (1.0, 1.0))
    assert ro.exact
    assert ro.cost == pytest.approx(eval_value(g, 0, (1.0, 1.0)), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_rollout_differentiates_interpolated_value(seed):
    # off-grid start and off-grid transitions: the vertex process still reproduces V_0
    s = random_node(seed, T=3, K=3, points=6)
    rng = np.random.default_rng(seed)
    p = -s.price + rng.uniform(-0.01, 0.01, s.T)
    g = s.backward("price", p)
    x0 = (1.13, 2.27)
    ro = rollout(s, g, x0)
    assert ro.cost == pytest.approx(eval_value(g, 0, x0), abs=1e-10)
    eps = 1e-7
    for t in range(s.T):
        fd = (s.perturbed_value(g, t, eps, x0) - s.perturbed_value(g, t, -eps, x0)) / (2 * eps)
        assert ro.delta[t] == pytest.approx(fd, abs=1e-6)
