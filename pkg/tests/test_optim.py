import numpy as np
import pytest

from microgrid_decomp.optim import gradient_descent, lbfgs, proximal_bundle, weak_wolfe


def quadratic(seed, n=6):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + n * np.eye(n)
    b = rng.normal(size=n)
    x_star = np.linalg.solve(H, b)

    def fg(x):
        return 0.5 * x @ H @ x - b @ x, H @ x - b
    return fg, x_star


@pytest.mark.parametrize("method", [lbfgs, gradient_descent, proximal_bundle])
def test_minimizes_quadratic(method):
    fg, x_star = quadratic(0)
    res = method(fg, np.zeros(6), max_iters=500, gtol=1e-8)
    np.testing.assert_allclose(res.x, x_star, atol=1e-5)


def test_lbfgs_memory_and_callback():
    fg, x_star = quadratic(1, n=20)
    seen = []
    res = lbfgs(fg, np.zeros(20), memory=5, max_iters=200, gtol=1e-8,
                callback=lambda k, x, f, g, t: seen.append(f))
    np.testing.assert_allclose(res.x, x_star, atol=1e-8)
    assert res.termination == "gradient tolerance"
    assert np.all(np.diff(seen) <= 1e-12)


def test_projection_keeps_iterates_in_subspace():
    fg, _ = quadratic(2, n=4)
    P = lambda v: v - v.mean()
    for method, kw in ((lbfgs, {}), (gradient_descent, {}), (proximal_bundle, {"ftol": 1e-14})):
        res = method(fg, np.zeros(4), project=P, max_iters=300, gtol=1e-9, **kw)
        assert abs(res.x.sum()) <= 1e-10
        # projected gradient vanishes at the constrained optimum
        assert np.linalg.norm(P(fg(res.x)[1])) <= 1e-5


def test_bundle_on_nonsmooth_function():
    # f(x) = max_i (a_i . x + b_i) + 0.5 |x|^2 / 10, minimum found by enumeration of pieces
    rng = np.random.default_rng(3)
    A, b = rng.normal(size=(8, 3)), rng.normal(size=8)

    def fg(x):
        v = A @ x + b
        i = int(np.argmax(v))
        return v[i] + 0.05 * x @ x, A[i] + 0.1 * x
    res = proximal_bundle(fg, np.zeros(3), max_iters=300, gtol=1e-10, ftol=1e-12)
    grid = rng.normal(scale=3.0, size=(20000, 3))
    fvals = (grid @ A.T + b).max(axis=1) + 0.05 * (grid * grid).sum(axis=1)
    assert res.f <= fvals.min() + 1e-9


def test_weak_wolfe():
    fg, _ = quadratic(4, n=3)
    x = np.ones(3)
    f0, g0 = fg(x)
    t, f, g = weak_wolfe(fg, x, f0, g0, -g0)
    assert f <= f0 + 1e-4 * t * (g0 @ -g0)
    assert g @ -g0 >= 0.9 * (g0 @ -g0)
    assert weak_wolfe(fg, x, f0, g0, g0) is None


def test_infeasible_start():
    fg = lambda x: (np.inf, np.zeros_like(x))
    assert gradient_descent(fg, np.zeros(2)).termination == "infeasible start"
    assert proximal_bundle(fg, np.zeros(2)).termination == "infeasible start"
