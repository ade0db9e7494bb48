"""Exhaustive reference solver for tiny instances.

Nodal controls range over the same grids as the nodal DP; the grid
exchange and arc flows are continuous and solved exactly.  Under stagewise
independence the optimal cost-to-go depends only on the stage and the
joint state, so enumerating the scenario tree reduces to a backward
recursion over the (finite) set of reachable joint states with exact
expectations over the joint atoms.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .devices import BOX_TOL, battery_next, tank_next, terminal_cost
from .nodal_dp import stage_exchange_cost

MAX_TREE = 10**6
FEAS_TOL = 1e-9


class TreeTooLarge(ValueError):
    pass


@dataclass
class OracleResult:
    value: float
    first_stage: list     # per joint atom: list of optimal joint control tuples ((u_b, u_t), ...)
    atoms: np.ndarray     # (M, N) atom indices of the first-stage joint noise


def _pieces(resale: bool, cap: float):
    """Pieces of the exchange cost: ``(fixed value or None, slope, lo, hi)``."""
    if resale:
        return [(None, 1.0, -cap, cap), (-cap, 0.0, -cap, -cap), (cap, 0.0, cap, cap)]
    return [(None, 0.0, -cap, 0.0), (0.0, 0.0, 0.0, 0.0), (None, 1.0, 0.0, cap),
            (-cap, 0.0, -cap, -cap), (cap, 0.0, cap, cap)]


def flow_value(a, price: float, c2, c1, c0, C, caps, resale: bool) -> np.ndarray:
    """``min_q sum_n phi(a_n - (Cq)_n) + sum_arcs l(q)`` with ``|u_ne| <= cap``.

    Solved exactly for every row of ``a`` (shape ``(M, N)``) by enumerating
    which piece of the exchange cost each node sits on and solving the
    equality-constrained quadratic program of each pattern.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    M, N = a.shape
    A = C.shape[1]
    c2 = np.asarray(c2, dtype=float)
    c1 = np.asarray(c1, dtype=float)
    best = np.full(M, np.inf)
    piece_sets = [_pieces(resale, float(caps[n])) for n in range(N)]
    for pattern in itertools.product(*piece_sets):
        E = [n for n, pc in enumerate(pattern) if pc[0] is not None]
        free = [n for n, pc in enumerate(pattern) if pc[0] is None]
        # gradient of the free linear part w.r.t. q: -sum_free price*slope*C_n
        s = np.array([price * pattern[n][1] for n in free])
        lin = c1 - (s @ C[free] if free else 0.0)
        k = len(E)
        K = np.zeros((A + k, A + k))
        K[:A, :A] = np.diag(2.0 * c2)
        K[:A, A:] = C[E].T
        K[A:, :A] = C[E]
        rhs = np.zeros((A + k, M))
        rhs[:A] = -lin[:, None]
        v = np.array([pattern[n][0] for n in E])
        if k:
            rhs[A:] = (a[:, E] - v[None, :]).T
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        q = sol[:A].T
        u = a - q @ C.T
        ok = np.ones(M, dtype=bool)
        if k:
            ok &= np.abs(u[:, E] - v[None, :]).max(axis=1) <= FEAS_TOL * max(1.0, float(np.abs(a).max()))
        for n in free:
            ok &= (u[:, n] >= pattern[n][2] - FEAS_TOL) & (u[:, n] <= pattern[n][3] + FEAS_TOL)
        if not ok.any():
            continue
        uc = np.clip(u, -caps[None, :], caps[None, :])
        val = stage_exchange_cost(uc, price, resale).sum(axis=1) + (c2 * q * q + c1 * q + c0).sum(axis=1)
        best = np.where(ok & (val < best), val, best)
    return best


def exact_solve(inst, x0=None, max_tree: int = MAX_TREE) -> OracleResult:
    """Optimal expected cost of the control-discretized problem.

    Raises :class:`TreeTooLarge` when the scenario tree has more than
    ``max_tree`` leaves.
    """
    T, N, K = inst.horizon, inst.n_nodes, inst.noise.n_atoms
    if float(K) ** (T * N) > max_tree:
        raise TreeTooLarge(f"scenario tree with {K}^{T * N} leaves exceeds {max_tree}")
    nodes = inst.nodes
    if x0 is None:
        x0 = [(s.b or 0.0, s.h) for s in inst.x0]
    C = inst.topology.incidence.astype(float)
    caps = np.array([m.u_ne_cap for m in nodes])
    price = inst.stage_price
    noise = inst.noise
    ctrls = [[(b, u) for b in m.u_b_values() for u in m.u_t_values()] for m in nodes]

    # forward reachable nodal states (rounded keys)
    def key(b, h):
        return (round(float(b), 12), round(float(h), 12))

    reach = [[{key(*x0[n])} for n in range(N)]]
    trans = []   # trans[t][n][k] -> (next index array (I, C), feasible mask)
    for t in range(T):
        nxt_sets, tr = [], []
        for n, m in enumerate(nodes):
            states = sorted(reach[t][n])
            bs = np.array([s[0] for s in states])
            hs = np.array([s[1] for s in states])
            cb = np.array([c[0] for c in ctrls[n]])
            ct = np.array([c[1] for c in ctrls[n]])
            bn = battery_next(bs[:, None], cb[None, :], m) if m.has_battery else np.zeros((len(bs), len(cb)))
            per_atom = []
            new = set()
            for k in range(K):
                hn = tank_next(hs[:, None], ct[None, :], noise.d_hw[t, n, k], m)
                ok = (hn >= -BOX_TOL) & (hn <= m.h_max + BOX_TOL)
                if m.has_battery:
                    ok &= (bn >= -BOX_TOL) & (bn <= m.b_max + BOX_TOL)
                keys = [[key(bn[i, j], hn[i, j]) for j in range(len(cb))] for i in range(len(bs))]
                for i in range(len(bs)):
                    for j in range(len(cb)):
                        if ok[i, j]:
                            new.add(keys[i][j])
                per_atom.append((keys, ok))
            nxt_sets.append(new)
            tr.append((states, per_atom))
        reach.append(nxt_sets)
        trans.append(tr)

    # terminal values on the product of reachable sets
    final = [sorted(reach[T][n]) for n in range(N)]
    V = np.zeros([len(s) for s in final])
    for n, m in enumerate(nodes):
        tc = terminal_cost(np.array([s[1] for s in final[n]]), m)
        shape = [1] * N
        shape[n] = len(final[n])
        V = V + tc.reshape(shape)
    index_next = [{s: i for i, s in enumerate(final[n])} for n in range(N)]

    first_stage = None
    atoms0 = None
    for t in range(T - 1, -1, -1):
        states = [trans[t][n][0] for n in range(N)]
        Vt = np.zeros([len(s) for s in states])
        joint_atoms = np.array(list(itertools.product(range(K), repeat=N)), dtype=np.int64).reshape(-1, N)
        c2, c1, c0 = inst.arc_c2[t], inst.arc_c1[t], inst.arc_c0[t]
        if t == 0:
            first_stage, atoms0 = [], joint_atoms
        for ks in joint_atoms:
            prob = float(np.prod([noise.prob[t, n, ks[n]] for n in range(N)]))
            # a-vector per joint control
            a_nodes = [np.array([noise.d_el[t, n, ks[n]] + cb + ct for cb, ct in ctrls[n]]) for n in range(N)]
            grids = np.meshgrid(*a_nodes, indexing="ij")
            a = np.stack([g.ravel() for g in grids], axis=1)
            F = flow_value(a, price[t], c2, c1, c0, C, caps, inst.resale).reshape([len(c) for c in ctrls])
            # gather V_{t+1}: axes (I_1, C_1, ..., I_N, C_N)
            idx, feas = [], []
            for n in range(N):
                keys, ok = trans[t][n][1][ks[n]]
                ix = np.array([[index_next[n].get(kk, 0) for kk in row] for row in keys], dtype=np.int64)
                idx.append(ix)
                feas.append(ok)
            shape_ic = []
            for n in range(N):
                shape_ic += [len(states[n]), len(ctrls[n])]
            gather = []
            for n in range(N):
                sh = [1] * (2 * N)
                sh[2 * n], sh[2 * n + 1] = idx[n].shape
                gather.append(idx[n].reshape(sh))
            Vn = V[tuple(gather)]
            okj = np.ones(shape_ic, dtype=bool)
            for n in range(N):
                sh = [1] * (2 * N)
                sh[2 * n], sh[2 * n + 1] = feas[n].shape
                okj = okj & feas[n].reshape(sh)
            Fsh = [1] * (2 * N)
            for n in range(N):
                Fsh[2 * n + 1] = len(ctrls[n])
            tot = np.where(okj, Vn + F.reshape(Fsh), np.inf)
            # move control axes last and minimize
            perm = [2 * n for n in range(N)] + [2 * n + 1 for n in range(N)]
            tot = tot.transpose(perm).reshape([len(s) for s in states] + [-1])
            best = tot.min(axis=-1)
            Vt = Vt + prob * best
            if t == 0:
                flat = tot.reshape(-1)
                opt = np.flatnonzero(flat <= flat.min() + 1e-12)
                dec = []
                for o in opt:
                    cs = np.unravel_index(o, [len(c) for c in ctrls])
                    dec.append(tuple(ctrls[n][cs[n]] for n in range(N)))
                first_stage.append(dec)
        V = Vt
        index_next = [{s: i for i, s in enumerate(states[n])} for n in range(N)]
    return OracleResult(float(V.reshape(-1)[0]), first_stage, atoms0)
