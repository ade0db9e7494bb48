"""Unconstrained first-order and quasi-Newton minimizers.

Both accept an optional ``project`` map onto a linear subspace; gradients
are projected before use, so iterates stay in the subspace.  Objectives may
be nonsmooth (dual functions), hence the weak Wolfe line search which
brackets instead of interpolating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    iterations: int
    termination: str


def _identity(v):
    return v


def weak_wolfe(fg, x, f0, g0, d, t0=1.0, c1=1e-4, c2=0.9, max_evals=30):
    """Bracketing line search for the weak Wolfe conditions.

    Returns ``(t, f, g)`` or ``None`` when no decrease was found.  If the
    curvature condition never holds, the best sufficient-decrease step is
    returned.
    """
    slope = float(g0 @ d)
    if slope >= 0:
        return None
    lo, hi, t = 0.0, np.inf, t0
    best = None
    for _ in range(max_evals):
        f, g = fg(x + t * d)
        if not np.isfinite(f) or f > f0 + c1 * t * slope:
            hi = t
        else:
            if best is None or f < best[1]:
                best = (t, f, g)
            if float(g @ d) < c2 * slope:
                lo = t
            else:
                return t, f, g
        t = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * t
    return best


def lbfgs(fg, x0, project=None, memory: int = 10, max_iters: int = 50, gtol: float = 1e-6,
          step0: float = 1.0, callback=None) -> OptimResult:
    """Limited-memory BFGS with a weak Wolfe line search.

    Stops when the (projected) gradient norm is below ``gtol``, after
    ``max_iters`` iterations, or when the line search finds no decrease.
    """
    P = project or _identity
    x = P(np.asarray(x0, dtype=float))
    f, g = fg(x)
    g = P(g)
    if not np.isfinite(f):
        return OptimResult(x, f, 0, "infeasible start")
    S, Y = [], []
    if callback:
        callback(0, x, f, g, 0.0)
    for k in range(1, max_iters + 1):
        gn = float(np.linalg.norm(g))
        if gn <= gtol:
            return OptimResult(x, f, k - 1, "gradient tolerance")
        q = g.copy()
        alpha = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alpha.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q *= step0 / gn
        for (s, y), a in zip(zip(S, Y), reversed(alpha)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        d = -P(q)
        if g @ d >= 0:
            d = -g * (step0 / gn)
            S, Y = [], []
        ls = weak_wolfe(lambda z: _pg(fg, P, z), x, f, g, d)
        if ls is None:
            return OptimResult(x, f, k - 1, "no descent direction")
        t, fn, gnew = ls
        xn = P(x + t * d)
        s, y = xn - x, gnew - g
        if s @ y > 1e-12 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(y))):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gnew
        if callback:
            callback(k, x, f, g, t)
    return OptimResult(x, f, max_iters, "max iterations")


def _pg(fg, P, z):
    f, g = fg(P(z))
    return f, P(g)


def gradient_descent(fg, x0, project=None, max_iters: int = 50, gtol: float = 1e-6,
                     step0: float = 1.0, c1: float = 1e-4, max_halvings: int = 30,
                     callback=None) -> OptimResult:
    """Projected gradient steps ``x - rho g`` with Armijo backtracking.

    ``rho`` starts so that the first step has length ``step0`` and is
    doubled after every accepted step.
    """
    P = project or _identity
    x = P(np.asarray(x0, dtype=float))
    f, g = fg(x)
    g = P(g)
    if not np.isfinite(f):
        return OptimResult(x, f, 0, "infeasible start")
    if callback:
        callback(0, x, f, g, 0.0)
    gn = float(np.linalg.norm(g))
    rho = step0 / gn if gn > 0 else step0
    for k in range(1, max_iters + 1):
        gn = float(np.linalg.norm(g))
        if gn <= gtol:
            return OptimResult(x, f, k - 1, "gradient tolerance")
        for _ in range(max_halvings):
            xn = P(x - rho * g)
            fn, gnew = fg(xn)
            if np.isfinite(fn) and fn <= f - c1 * rho * gn * gn:
                break
            rho *= 0.5
        else:
            return OptimResult(x, f, k - 1, "no descent direction")
        x, f, g = xn, fn, P(gnew)
        if callback:
            callback(k, x, f, g, rho)
        rho *= 2.0
    return OptimResult(x, f, max_iters, "max iterations")


def proximal_bundle(fg, x0, project=None, max_iters: int = 50, gtol: float = 1e-6,
                    step0: float = 1.0, m_serious: float = 0.1, max_bundle: int = 50,
                    ftol: float = 1e-9, max_evals: int | None = None, callback=None) -> OptimResult:
    """Proximal bundle method for convex, possibly nonsmooth objectives.

    Each iteration minimizes the cutting-plane model plus a proximal term
    ``u/2 |x - center|^2``; a trial point becomes the new center when it
    achieves a fraction ``m_serious`` of the predicted decrease.  Stops when
    the predicted decrease falls below ``ftol`` (relative), when both the
    aggregate subgradient and the predicted decrease fall below ``gtol``, or
    after ``max_iters`` serious steps.
    """
    from .qp import QPStructure, solve_qp

    P = project or _identity
    xc = P(np.asarray(x0, dtype=float))
    fc, g = fg(xc)
    g = P(g)
    if not np.isfinite(fc):
        return OptimResult(xc, fc, 0, "infeasible start")
    if callback:
        callback(0, xc, fc, g, 0.0)
    gn = float(np.linalg.norm(g))
    if gn <= gtol:
        return OptimResult(xc, fc, 0, "gradient tolerance")
    u = gn / step0
    n = len(xc)
    pts, fs, gs = [xc.copy()], [fc], [g.copy()]
    k_serious = 0
    for it in range(1, (max_evals or 5 * max_iters) + 1):
        J = len(fs)
        # variables (d, theta): min theta + u/2 |d|^2, f_j + g_j'(xc + d - x_j) <= theta
        Gm = np.hstack([np.array(gs), -np.ones((J, 1))])
        hv = np.array([-(fs[j] + gs[j] @ (xc - pts[j])) for j in range(J)])
        st = QPStructure(np.r_[np.full(n, u), 0.0], np.zeros((0, n + 1)), Gm,
                         np.full(n + 1, -np.inf), np.full(n + 1, np.inf))
        sol = solve_qp(st, np.r_[np.zeros(n), 1.0][None], np.zeros((1, 0)), hv[None], tol=1e-11)
        d = P(sol.z[0, :n])
        pred = fc - sol.z[0, n]
        if pred <= ftol * max(1.0, abs(fc)):
            return OptimResult(xc, fc, k_serious, "model decrease below tolerance")
        if u * np.linalg.norm(d) <= gtol and pred <= gtol:
            return OptimResult(xc, fc, k_serious, "gradient tolerance")
        xt = xc + d
        ft, gt = fg(xt)
        gt = P(gt)
        if np.isfinite(ft):
            pts.append(xt.copy())
            fs.append(ft)
            gs.append(gt.copy())
        if np.isfinite(ft) and ft <= fc - m_serious * pred:
            xc, fc = xt, ft
            k_serious += 1
            u = max(u * 0.5, 1e-8)
            if callback:
                callback(k_serious, xc, fc, gt, float(np.linalg.norm(d)))
            if k_serious >= max_iters:
                return OptimResult(xc, fc, k_serious, "max iterations")
        else:
            u = min(u * 2.0, 1e12)
        if len(fs) > max_bundle:
            # keep the cuts active in the last model plus the newest
            act = np.flatnonzero(sol.lam[0] > 1e-10).tolist()
            keep = sorted(set(act[-(max_bundle - 1):] + [len(fs) - 1]))
            pts = [pts[j] for j in keep]
            fs = [fs[j] for j in keep]
            gs = [gs[j] for j in keep]
    return OptimResult(xc, fc, k_serious, "evaluation budget")
