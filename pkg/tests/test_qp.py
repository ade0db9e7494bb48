import cvxpy as cp
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from microgrid_decomp.qp import QPError, QPStructure, dual_value, solve_qp


def random_qp(seed, n=8, m=3, p=4, flat=2):
    """Feasible box-constrained QP with some zero-curvature coordinates."""
    rng = np.random.default_rng(seed)
    H = rng.uniform(0.5, 2.0, n)
    H[:flat] = 0.0
    A = rng.normal(size=(m, n))
    G = rng.normal(size=(p, n))
    lb = -rng.uniform(0.5, 2.0, n)
    ub = rng.uniform(0.5, 2.0, n)
    z0 = rng.uniform(0.3 * lb, 0.3 * ub)
    b = A @ z0
    h = G @ z0 + rng.uniform(0.1, 1.0, p)
    c = rng.normal(size=n)
    return QPStructure(H, A, G, lb, ub), c, b, h


def cvx_solve(S, c, b, h):
    z = cp.Variable(S.n)
    obj = 0.5 * cp.sum(cp.multiply(S.H, cp.square(z))) + c @ z
    cons = [S.A @ z == b, S.G.toarray() @ z <= h, z >= S.lb, z <= S.ub]
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@given(seed=st.integers(0, 10_000))
def test_matches_cvxpy(seed):
    S, c, b, h = random_qp(seed)
    res = solve_qp(S, c[None], b[None], h[None])
    assert res.converged.all()
    assert res.obj[0] == pytest.approx(cvx_solve(S, c, b, h), abs=1e-6)
    z = res.z[0]
    assert np.abs(S.A @ z - b).max() <= 1e-8
    assert (S.G @ z - h).max() <= 1e-8
    assert np.all(z >= S.lb - 1e-9) and np.all(z <= S.ub + 1e-9)


@given(seed=st.integers(0, 10_000))
def test_dual_value_is_a_lower_bound(seed):
    S, c, b, h = random_qp(seed)
    res = solve_qp(S, c[None], b[None], h[None])
    val, _ = dual_value(S, c[None], b[None], h[None], res.y, res.lam)
    assert val[0] <= res.obj[0] + 1e-9
    assert val[0] >= res.obj[0] - 1e-6
    # any multipliers give a lower bound
    rng = np.random.default_rng(seed)
    y, lam = rng.normal(size=res.y.shape), rng.uniform(0, 1, res.lam.shape)
    val2, _ = dual_value(S, c[None], b[None], h[None], y, lam)
    assert val2[0] <= res.obj[0] + 1e-9


def test_batch_equals_individual_solves():
    S, c, b, h = random_qp(7)
    rng = np.random.default_rng(0)
    cs = c[None] + 0.1 * rng.normal(size=(5, S.n))
    batch = solve_qp(S, cs, b[None], h[None])
    for k in range(5):
        one = solve_qp(S, cs[k:k + 1], b[None], h[None])
        assert batch.obj[k] == pytest.approx(one.obj[0], abs=1e-9)


def test_infeasible_problem_not_converged():
    # z1 = 5 but z1 <= 1
    S = QPStructure(np.ones(2), np.array([[1.0, 0.0]]), None, [-1.0, -1.0], [1.0, 1.0])
    res = solve_qp(S, np.zeros((1, 2)), np.array([[5.0]]), np.zeros((1, 0)))
    assert not res.converged[0]


def test_flat_tolerance_in_dual():
    # free linear coordinate with a tiny reduced cost
    S = QPStructure(np.array([0.0]), np.zeros((0, 1)), None, [-np.inf], [np.inf])
    c = np.array([[1e-12]])
    v, _ = dual_value(S, c, np.zeros((1, 0)), np.zeros((1, 0)), np.zeros((1, 0)), np.zeros((1, 0)))
    assert v[0] == -np.inf
    v, _ = dual_value(S, c, np.zeros((1, 0)), np.zeros((1, 0)), np.zeros((1, 0)), np.zeros((1, 0)),
                      flat_tol=1e-9)
    assert v[0] == 0.0


def test_bad_bounds():
    with pytest.raises(QPError):
        QPStructure(np.ones(1), np.zeros((0, 1)), sp.csr_matrix((0, 1)), [1.0], [0.0])
