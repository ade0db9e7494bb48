"""Batched primal-dual interior point method for convex QPs with diagonal Hessian.

Solves ``K`` problems sharing their matrices::

    min  1/2 z' diag(H) z + c_k' z
    s.t. A z = b_k,  G z <= h_k,  lb <= z <= ub

with Mehrotra predictor-corrector steps.  ``G`` may be a SciPy sparse
matrix; only ``G' D G`` and matrix-vector products are formed, so long
lists of sparse cut rows stay cheap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass
class QPResult:
    z: np.ndarray        # (K, n)
    y: np.ndarray        # (K, m) equality multipliers
    lam: np.ndarray      # (K, p) inequality multipliers
    lam_lb: np.ndarray   # (K, n)
    lam_ub: np.ndarray   # (K, n)
    obj: np.ndarray      # (K,)
    converged: np.ndarray
    iterations: int
    residual: np.ndarray  # (K,) max scaled KKT residual


class QPError(RuntimeError):
    pass


def _gram_scatter(G, n):
    """Sparse map ``Q`` with ``vec(G' diag(d) G) = Q' d``."""
    G = sp.csr_matrix(G)
    rows, cols, vals = [], [], []
    for r in range(G.shape[0]):
        s, e = G.indptr[r], G.indptr[r + 1]
        idx, v = G.indices[s:e], G.data[s:e]
        for a in range(len(idx)):
            for b in range(len(idx)):
                rows.append(r)
                cols.append(idx[a] * n + idx[b])
                vals.append(v[a] * v[b])
    return sp.csr_matrix((vals, (rows, cols)), shape=(G.shape[0], n * n))


class QPStructure:
    """Matrices shared by a batch; reusable across calls with new vectors."""

    def __init__(self, H, A, G, lb, ub):
        self.H = np.asarray(H, dtype=float)
        self.n = len(self.H)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.n)
        if G is None:
            G = np.zeros((0, self.n))
        self.G = sp.csr_matrix(G)
        self.GT = self.G.T.tocsr()
        self.Q = _gram_scatter(self.G, self.n).T.tocsr() if self.G.shape[0] else None
        self.lb = np.broadcast_to(np.asarray(lb, dtype=float), (self.n,)).copy()
        self.ub = np.broadcast_to(np.asarray(ub, dtype=float), (self.n,)).copy()
        if np.any(self.lb > self.ub):
            raise QPError("lower bound above upper bound")
        self.has_lb = np.isfinite(self.lb)
        self.has_ub = np.isfinite(self.ub)

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.G.shape[0]


def _max_step(v, dv):
    """Largest ``a`` in (0, 1] with ``v + a dv >= 0`` row-wise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, r.min(axis=1)) if r.shape[1] else np.ones(v.shape[0])


def solve_qp(struct: QPStructure, c, b, h, tol: float = 1e-10, max_iter: int = 100,
             reg: float = 1e-12) -> QPResult:
    """Solve the batch; ``c`` is ``(K, n)``, ``b`` ``(K, m)``, ``h`` ``(K, p)``."""
    S = struct
    n, m, p = S.n, S.m, S.p
    c = np.atleast_2d(np.asarray(c, dtype=float))
    K = c.shape[0]
    b = np.broadcast_to(np.asarray(b, dtype=float), (K, m)) if m else np.zeros((K, 0))
    h = np.broadcast_to(np.asarray(h, dtype=float), (K, p)) if p else np.zeros((K, 0))
    H = S.H
    lo = np.where(S.has_lb, S.lb, 0.0)
    hi = np.where(S.has_ub, S.ub, 0.0)
    L, U = S.has_lb, S.has_ub

    # start strictly inside the bounds
    z = np.zeros((K, n))
    both = L & U
    width = np.where(both, hi - lo, 1.0)
    z[:, both] = (lo + 0.5 * width)[both]
    only_l = L & ~U
    only_u = U & ~L
    z[:, only_l] = np.maximum(0.0, lo[only_l] + 1.0)
    z[:, only_u] = np.minimum(0.0, hi[only_u] - 1.0)
    y = np.zeros((K, m))
    Gz = (S.G @ z.T).T if p else np.zeros((K, 0))
    s = np.maximum(h - Gz, 1.0)
    lam = np.ones((K, p))
    lam_l = np.where(L, 1.0, 0.0) * np.ones((K, n))
    lam_u = np.where(U, 1.0, 0.0) * np.ones((K, n))
    n_comp = p + int(L.sum()) + int(U.sum())
    scale_c = 1.0 + np.abs(c).max(axis=1)
    scale_b = 1.0 + (np.abs(b).max(axis=1) if m else 0.0)
    scale_h = 1.0 + (np.abs(h).max(axis=1) if p else 0.0)
    AT = S.A.T
    err = np.seterr(divide="ignore", invalid="ignore", over="ignore")
    try:
        z, y, lam, lam_l, lam_u, done, res, it = _ipm_loop(
            S, c, b, h, H, lo, hi, L, U, z, y, s, lam, lam_l, lam_u, n_comp,
            scale_c, scale_b, scale_h, AT, max_iter, tol, reg)
    finally:
        np.seterr(**err)
    obj = 0.5 * (H * z * z).sum(axis=1) + (c * z).sum(axis=1)
    return QPResult(z, y, lam, lam_l, lam_u, obj, done, it, res)


def _ipm_loop(S, c, b, h, H, lo, hi, L, U, z, y, s, lam, lam_l, lam_u, n_comp,
              scale_c, scale_b, scale_h, AT, max_iter, tol, reg):
    n, m, p = S.n, S.m, S.p
    K = c.shape[0]
    done = np.zeros(K, dtype=bool)
    frozen = np.zeros(K, dtype=bool)
    res = np.full(K, np.inf)
    best_res = np.full(K, np.inf)
    best = [z.copy(), y.copy(), lam.copy(), lam_l.copy(), lam_u.copy()]
    it = 0
    for it in range(1, max_iter + 1):
        sl = np.where(L, z - lo, 1.0)
        su = np.where(U, hi - z, 1.0)
        GTlam = (S.GT @ lam.T).T if p else 0.0
        rd = H * z + c + (y @ S.A if m else 0.0) + GTlam - lam_l + lam_u
        rp = z @ AT - b if m else np.zeros((K, 0))
        Gz = (S.G @ z.T).T if p else np.zeros((K, 0))
        rg = Gz + s - h
        mu = ((s * lam).sum(axis=1) + (np.where(L, sl * lam_l, 0.0)).sum(axis=1)
              + (np.where(U, su * lam_u, 0.0)).sum(axis=1)) / max(n_comp, 1)
        res = np.maximum.reduce([np.abs(rd).max(axis=1) / scale_c,
                                 (np.abs(rp).max(axis=1) if m else np.zeros(K)) / scale_b,
                                 (np.abs(rg).max(axis=1) if p else np.zeros(K)) / scale_h,
                                 mu])
        # keep the best iterate; late steps can break down numerically
        res = np.where(np.isfinite(res), res, np.inf)
        frozen |= ~np.isfinite(res)
        better = res < best_res
        if better.any():
            best_res = np.where(better, res, best_res)
            for dst, src in zip(best, (z, y, lam, lam_l, lam_u)):
                dst[better] = src[better]
        done = (res <= tol) | frozen
        if done.all():
            break
        # reduced system
        Dg = lam / s
        Dl = np.where(L, lam_l / sl, 0.0)
        Du = np.where(U, lam_u / su, 0.0)
        M = np.zeros((K, n + m, n + m))
        diag = H + Dl + Du + reg
        M[:, np.arange(n), np.arange(n)] = diag
        if p:
            M[:, :n, :n] += (S.Q @ Dg.T).T.reshape(K, n, n)
        if m:
            M[:, :n, n:] = AT
            M[:, n:, :n] = S.A
            M[:, np.arange(n, n + m), np.arange(n, n + m)] = -reg

        stuck = ~np.isfinite(M).all(axis=(1, 2))
        if stuck.any():
            # numerically exhausted problems keep their last iterate
            M[stuck] = np.eye(n + m)
            frozen |= stuck
            done = done | stuck

        def solve(rc, rcl, rcu):
            rhs_z = -rd - (((S.GT @ ((lam * rg - rc) / s).T).T) if p else 0.0) \
                - np.where(L, rcl / sl, 0.0) + np.where(U, rcu / su, 0.0)
            rhs = np.concatenate([rhs_z, -rp], axis=1)
            try:
                d = np.linalg.solve(M, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                d = np.stack([np.linalg.lstsq(M[k], rhs[k], rcond=None)[0] for k in range(K)])
            dz, dy = d[:, :n], d[:, n:]
            Gdz = (S.G @ dz.T).T if p else np.zeros((K, 0))
            ds = -rg - Gdz
            dlam = (-rc - lam * ds) / s
            dlam_l = np.where(L, (-rcl - lam_l * dz) / sl, 0.0)
            dlam_u = np.where(U, (-rcu + lam_u * dz) / su, 0.0)
            return dz, dy, ds, dlam, dlam_l, dlam_u

        def step_len(dz, ds, dlam, dll, dlu):
            a = np.minimum.reduce([_max_step(s, ds), _max_step(lam, dlam),
                                   _max_step(np.where(L, sl, 1.0), np.where(L, dz, 0.0)),
                                   _max_step(np.where(U, su, 1.0), np.where(U, -dz, 0.0)),
                                   _max_step(np.where(L, lam_l, 1.0), np.where(L, dll, 0.0)),
                                   _max_step(np.where(U, lam_u, 1.0), np.where(U, dlu, 0.0))])
            return a

        # predictor
        rc = s * lam
        rcl = np.where(L, sl * lam_l, 0.0)
        rcu = np.where(U, su * lam_u, 0.0)
        dz, dy, ds, dlam, dll, dlu = solve(rc, rcl, rcu)
        a = step_len(dz, ds, dlam, dll, dlu)[:, None]
        mu_aff = (((s + a * ds) * (lam + a * dlam)).sum(axis=1)
                  + np.where(L, (sl + a * dz) * (lam_l + a * dll), 0.0).sum(axis=1)
                  + np.where(U, (su - a * dz) * (lam_u + a * dlu), 0.0).sum(axis=1)) / max(n_comp, 1)
        sigma = (np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0) ** 3)[:, None]
        smu = sigma * mu[:, None]
        # corrector
        rc = s * lam + ds * dlam - smu
        rcl = np.where(L, sl * lam_l + dz * dll - smu, 0.0)
        rcu = np.where(U, su * lam_u - dz * dlu - smu, 0.0)
        dz, dy, ds, dlam, dll, dlu = solve(rc, rcl, rcu)
        a = np.minimum(1.0, 0.995 * step_len(dz, ds, dlam, dll, dlu))
        a = np.where(done, 0.0, a)[:, None]
        z = z + a * dz
        y = y + a * dy
        s = s + a * ds
        lam = lam + a * dlam
        lam_l = lam_l + a * dll
        lam_u = lam_u + a * dlu
    z, y, lam, lam_l, lam_u = best
    return z, y, lam, lam_l, lam_u, best_res <= tol, best_res, it


def dual_value(struct: QPStructure, c, b, h, y, lam, flat_tol: float = 0.0):
    """Lagrangian dual function at ``(y, lam)``, minimized over the box.

    Any ``y`` and ``lam >= 0`` give a valid lower bound on the optimal
    value.  Coordinates with zero curvature and an infinite bound must
    have zero reduced cost, otherwise the bound is ``-inf``; reduced costs
    below ``flat_tol`` in magnitude are rounded to zero there.
    """
    S = struct
    c = np.atleast_2d(c)
    lam = np.maximum(lam, 0.0)
    red = c + (y @ S.A if S.m else 0.0) + ((S.GT @ lam.T).T if S.p else 0.0)
    H = S.H
    if flat_tol > 0:
        free = (H <= 0) & ~(S.has_lb & S.has_ub)
        red = np.where(free & (np.abs(red) <= flat_tol), 0.0, red)
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(H > 0, -red / np.where(H > 0, H, 1.0), 0.0)
    lo = np.where(S.has_lb, S.lb, -np.inf)
    hi = np.where(S.has_ub, S.ub, np.inf)
    flat = H <= 0
    # zero-curvature coordinates go to the bound that minimizes red*z
    zs = np.where(flat, np.where(red > 0, lo, np.where(red < 0, hi, np.clip(0.0, lo, hi))), np.clip(zs, lo, hi))
    with np.errstate(invalid="ignore"):
        curved = 0.5 * H * np.where(flat, 0.0, zs) ** 2 + red * np.where(flat, 0.0, zs)
        linear = np.where(red == 0, 0.0, red * zs)
    term = np.where(flat, linear, curved)
    val = term.sum(axis=1) - (y * b).sum(axis=1) - ((lam * h).sum(axis=1) if S.p else 0.0)
    return val, zs
