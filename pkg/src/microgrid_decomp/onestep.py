"""Global one-stage problem: all nodes, all arcs, polyhedral cost-to-go.

Given the stage state ``x`` and the observed noise, the stage decision
minimizes exchange and transport costs plus a polyhedral model of the next
value function, subject to Kirchhoff's law, the load balances and the
storage dynamics.  Battery power is split into charge and discharge parts,
which keeps the problem a convex QP.  The same model serves SDDP (forward
and backward passes) and policy simulation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .devices import BOX_TOL
from .qp import QPStructure, dual_value, solve_qp


@dataclass
class PolyhedralValue:
    """``const + sum_j max_i (alpha_ji + beta_ji' x[idx_j])``.

    Each block is ``(idx, slopes (J, len(idx)), intercepts (J,))``.
    """
    blocks: list = field(default_factory=list)
    const: float = 0.0

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(x.shape[0], self.const)
        for idx, beta, alpha in self.blocks:
            out = out + (x[:, idx] @ beta.T + alpha[None, :]).max(axis=1)
        return out

    @property
    def n_cuts(self) -> int:
        return sum(len(a) for _, _, a in self.blocks)


def terminal_value(inst) -> PolyhedralValue:
    """Hot water shortfall penalty written as per-node two-piece maxima."""
    blocks = []
    for n, (ib, ih) in enumerate(inst.state_slices()):
        m = inst.nodes[n]
        blocks.append((np.array([ih]), np.array([[0.0], [-m.kappa]]), np.array([0.0, m.kappa * m.h_ref])))
    return PolyhedralValue(blocks)


class StageModel:
    """Stage ``t`` QP for a fixed cost-to-go model; vectors vary per problem."""

    def __init__(self, inst, t: int, value: PolyhedralValue):
        self.inst, self.t, self.value = inst, t, value
        N, A = inst.n_nodes, inst.n_arcs
        dt = inst.delta_t
        C = inst.topology.incidence.astype(float)
        names = []
        lb, ub, cost, H = [], [], [], []

        def var(name, lo, hi, c=0.0, h=0.0):
            names.append(name)
            lb.append(lo)
            ub.append(hi)
            cost.append(c)
            H.append(h)
            return len(names) - 1

        price = inst.stage_price[t]
        self.ix = []
        for n, m in enumerate(inst.nodes):
            d = {}
            if m.has_battery:
                d["up"] = var(("up", n), 0.0, m.u_b_max)
                d["um"] = var(("um", n), 0.0, m.u_b_max)
            d["ut"] = var(("ut", n), 0.0, m.u_t_max)
            d["une"] = var(("une", n), -m.u_ne_cap, m.u_ne_cap, price if inst.resale else 0.0)
            if not inst.resale:
                d["s"] = var(("s", n), 0.0, m.u_ne_cap, price)
            if m.has_battery:
                d["b1"] = var(("b1", n), 0.0, m.b_max)
            d["h1"] = var(("h1", n), 0.0, m.h_max)
            self.ix.append(d)
        self.q = np.array([var(("q", a), -np.inf, np.inf, inst.arc_c1[t, a], 2.0 * inst.arc_c2[t, a])
                           for a in range(A)], dtype=np.int64)
        self.theta = np.array([var(("theta", j), -np.inf, np.inf, 1.0) for j in range(len(value.blocks))],
                              dtype=np.int64)
        nv = len(names)
        self.n = nv
        # next-state variable for each global state coordinate
        nxt = []
        for n, (ib, ih) in enumerate(inst.state_slices()):
            if ib is not None:
                nxt.append(self.ix[n]["b1"])
            nxt.append(self.ix[n]["h1"])
        self.next_idx = np.array(nxt, dtype=np.int64)

        rows, Bx = [], []
        d_el_rows, d_hw_rows = [], []
        Aeq = []
        slices = inst.state_slices()
        for n, m in enumerate(inst.nodes):
            r = np.zeros(nv)
            d = self.ix[n]
            r[d["une"]] = 1.0
            r[d["ut"]] = -1.0
            if m.has_battery:
                r[d["up"]] = -1.0
                r[d["um"]] = 1.0
            r[self.q] = C[n]
            Aeq.append(r)
            d_el_rows.append(len(Aeq) - 1)
        self.balance_rows = np.array(d_el_rows)
        dyn_b, dyn_h = [], []
        for n, m in enumerate(inst.nodes):
            d = self.ix[n]
            ib, ih = slices[n]
            if m.has_battery:
                r = np.zeros(nv)
                r[d["b1"]] = 1.0
                r[d["up"]] = -dt * m.rho_c
                r[d["um"]] = dt / m.rho_d
                Aeq.append(r)
                dyn_b.append((len(Aeq) - 1, ib, m.alpha_b))
            r = np.zeros(nv)
            r[d["h1"]] = 1.0
            r[d["ut"]] = -dt * m.beta_h
            Aeq.append(r)
            dyn_h.append((len(Aeq) - 1, ih, m.alpha_h, n))
        self.A = np.array(Aeq)
        me = len(Aeq)
        # b = b_noise + B x
        self.B = np.zeros((me, inst.state_dim))
        for row, ib, a in dyn_b:
            self.B[row, ib] = a
        for row, ih, a, n in dyn_h:
            self.B[row, ih] = a
        self.tank_rows = np.array([row for row, *_ in dyn_h])
        # inequalities: no-resale epigraph rows then cut rows
        G_rows, G_cols, G_vals, h = [], [], [], []
        k = 0
        if not inst.resale:
            for n in range(N):
                G_rows += [k, k]
                G_cols += [self.ix[n]["une"], self.ix[n]["s"]]
                G_vals += [1.0, -1.0]
                h.append(0.0)
                k += 1
        self.cut_rows = []
        for j, (idx, beta, alpha) in enumerate(value.blocks):
            start = k
            for i in range(len(alpha)):
                cols = list(self.next_idx[idx]) + [self.theta[j]]
                vals = list(beta[i]) + [-1.0]
                G_rows += [k] * len(cols)
                G_cols += cols
                G_vals += vals
                h.append(-alpha[i])
                k += 1
            self.cut_rows.append(np.arange(start, k))
        G = sp.csr_matrix((G_vals, (G_rows, G_cols)), shape=(k, nv))
        self.h = np.array(h)
        self.c = np.array(cost)
        self.const = float(inst.arc_c0[t].sum()) + value.const
        self.struct = QPStructure(np.array(H), self.A, G, np.array(lb), np.array(ub))

    def rhs(self, x, d_hw, d_el):
        """Equality right-hand sides for states ``(K, dim)`` and noises ``(K, N)``."""
        x = np.atleast_2d(x)
        K = max(x.shape[0], np.atleast_2d(d_el).shape[0])
        b = np.zeros((K, self.A.shape[0]))
        b[:, self.balance_rows] = d_el
        b[:, self.tank_rows] = -self.inst.delta_t * np.asarray(d_hw)
        return b + x @ self.B.T

    def solve(self, x, d_hw, d_el, tol: float = 1e-10):
        b = self.rhs(x, d_hw, d_el)
        K = b.shape[0]
        c = np.broadcast_to(self.c, (K, self.n))
        res = solve_qp(self.struct, c, b, self.h[None], tol=tol)
        if not res.converged.all():
            bad = int(np.flatnonzero(~res.converged)[0])
            if not res.residual[bad] <= 1e-6:
                raise StageInfeasible(
                    f"stage {self.t}: QP failed (residual {res.residual[bad]:.2e}) at state "
                    f"{np.round(np.atleast_2d(x)[min(bad, len(np.atleast_2d(x)) - 1)], 6).tolist()}")
        return res, b

    def cut(self, res, b, x):
        """Valid affine minorants ``alpha + beta' x`` of the stage value, one per problem."""
        lam = res.lam.copy()
        for rows in self.cut_rows:
            tot = lam[:, rows].sum(axis=1, keepdims=True)
            lam[:, rows] = np.where(tot > 0, lam[:, rows] / np.where(tot > 0, tot, 1.0), 1.0 / len(rows))
        K = b.shape[0]
        c = np.broadcast_to(self.c, (K, self.n))
        val, _ = dual_value(self.struct, c, b, np.broadcast_to(self.h, (K, len(self.h))), res.y, lam, flat_tol=1e-9)
        val = val + self.const
        beta = -(res.y @ self.B)
        alpha = val - (np.atleast_2d(x) * beta).sum(axis=1)
        return alpha, beta

    def decisions(self, z):
        """Controls ``u_b, u_t, u_ne`` (each ``(K, N)``), flows ``q`` and next states."""
        inst = self.inst
        K = z.shape[0]
        N = inst.n_nodes
        u_b = np.zeros((K, N))
        up = np.zeros((K, N))
        um = np.zeros((K, N))
        u_t = np.zeros((K, N))
        u_ne = np.zeros((K, N))
        for n, m in enumerate(inst.nodes):
            d = self.ix[n]
            if m.has_battery:
                up[:, n] = np.clip(z[:, d["up"]], 0.0, m.u_b_max)
                um[:, n] = np.clip(z[:, d["um"]], 0.0, m.u_b_max)
            u_t[:, n] = np.clip(z[:, d["ut"]], 0.0, m.u_t_max)
            u_ne[:, n] = np.clip(z[:, d["une"]], -m.u_ne_cap, m.u_ne_cap)
        return up, um, u_t, u_ne, z[:, self.q]


class StageInfeasible(RuntimeError):
    pass


def stage_cost(inst, t, u_ne, q):
    """True stage cost: exchange plus transport, per problem."""
    price = inst.stage_price[t]
    ex = price * (u_ne if inst.resale else np.maximum(u_ne, 0.0))
    c2, c1, c0 = inst.arc_c2[t], inst.arc_c1[t], inst.arc_c0[t]
    return ex.sum(axis=1) + (c2 * q * q + c1 * q + c0).sum(axis=1)


def next_state(inst, x, up, um, u_t, d_hw):
    """Exact dynamics for the global state; tiny box overshoots are clipped."""
    x = np.atleast_2d(x)
    out = np.empty_like(x, dtype=float)
    dt = inst.delta_t
    for n, (ib, ih) in enumerate(inst.state_slices()):
        m = inst.nodes[n]
        if ib is not None:
            b = m.alpha_b * x[:, ib] + dt * (m.rho_c * up[:, n] - um[:, n] / m.rho_d)
            out[:, ib] = _clip_box(b, m.b_max)
        h = m.alpha_h * x[:, ih] + dt * (m.beta_h * u_t[:, n] - d_hw[:, n])
        out[:, ih] = _clip_box(h, m.h_max)
    return out


def _clip_box(v, upper, tol=1e-7):
    if np.any(v < -tol) or np.any(v > upper + tol):
        raise StageInfeasible(f"state left its box: range [{v.min():.3g}, {v.max():.3g}], upper {upper}")
    return np.clip(v, 0.0, upper)
