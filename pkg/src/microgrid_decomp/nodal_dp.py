"""Tabular dynamic programming for the nodal subproblems.

Each node is solved on a uniform state grid with multilinear
interpolation, in hazard-decision form: the stage noise is observed before
the decision, so the expectation sits outside the minimum.  Under a price
process the grid exchange ``u_ne`` is minimized in closed form; under a
resource process it is fixed by the balance constraint.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .devices import BOX_TOL, NodeModel, battery_next, tank_next, terminal_cost

SENTINEL = 1e9
WEIGHT_SNAP = 1e-9
EXACT_PARTICLES = 10_000


class InfeasibleNodeError(RuntimeError):
    """A nodal value needed for a bound is infinite."""


def stage_exchange_cost(u_ne, price, resale: bool):
    u_ne = np.asarray(u_ne, dtype=float)
    return price * (u_ne if resale else np.maximum(u_ne, 0.0))


def exchange_derivative(u_ne, price, resale: bool):
    """Right derivative of the exchange cost."""
    u_ne = np.asarray(u_ne, dtype=float)
    if resale:
        return np.full_like(u_ne, price)
    return np.where(u_ne >= 0.0, price, 0.0)


def price_exchange(p: float, price: float, cap: float, resale: bool):
    """Closed-form ``min_u phi(u) + p u`` over ``[-cap, cap]``; ties go to 0."""
    best_u, best = 0.0, 0.0
    for u in (-cap, cap):
        v = float(stage_exchange_cost(u, price, resale)) + p * u
        if v < best:
            best_u, best = u, v
    return best_u, best


def axis(upper: float, points: int, present: bool = True) -> np.ndarray:
    if not present:
        return np.zeros(1)
    return np.linspace(0.0, upper, points)


def interp_table(v, upper: float, g: int):
    """Lower vertex, upper weight and in-box flag for values ``v`` on a uniform axis."""
    v = np.asarray(v, dtype=float)
    ok = ((v >= -BOX_TOL) & (v <= upper + BOX_TOL)).astype(np.uint8)
    if g == 1:
        return np.zeros(v.shape, dtype=np.int64), np.zeros(v.shape), ok
    pos = v * ((g - 1) / upper)
    lo = np.clip(np.floor(pos), 0, g - 2).astype(np.int64)
    w = np.clip(pos - lo, 0.0, 1.0)
    w = np.where(w < WEIGHT_SNAP, 0.0, np.where(w > 1.0 - WEIGHT_SNAP, 1.0, w))
    return lo, w, ok


@dataclass
class ValueGrid:
    """Nodal value functions ``V_t`` for ``t = 0..T`` on a ``(gb, gh)`` grid.

    ``mode`` is ``"price"`` or ``"resource"`` and ``process`` holds the
    stage prices ``p`` or resources ``r`` the grid was computed for.
    """
    model: NodeModel
    b_axis: np.ndarray
    h_axis: np.ndarray
    values: np.ndarray
    mode: str
    process: np.ndarray
    infeasible: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def __call__(self, t, x):
        return eval_value(self, t, x)


def eval_value(grid: ValueGrid, t: int, x, clamp: bool = True, return_flag: bool = False):
    """Multilinear interpolation of ``V_t`` at ``x``.

    ``x`` is a :class:`NodalState`, a pair ``(b, h)``, or a tank level for
    nodes without a battery.  Points outside the box are clamped to it when
    ``clamp`` is set (``return_flag`` then also reports whether clamping
    happened); otherwise they raise ``ValueError``.
    """
    m = grid.model
    if hasattr(x, "h"):
        b, h = (x.b or 0.0), x.h
    elif np.ndim(x) == 0:
        b, h = 0.0, float(x)
    else:
        b, h = float(x[0]), float(x[1])
    b_max = m.b_max if m.has_battery else 0.0
    cb = min(max(b, 0.0), b_max)
    ch = min(max(h, 0.0), m.h_max)
    clamped = abs(cb - b) > BOX_TOL or abs(ch - h) > BOX_TOL
    if clamped and not clamp:
        raise ValueError(f"state ({b}, {h}) outside the grid box")
    ib, wb, _ = interp_table(np.array([cb]), b_max if m.has_battery else 1.0, len(grid.b_axis))
    ih, wh, _ = interp_table(np.array([ch]), m.h_max, len(grid.h_axis))
    V = grid.values[t]
    i0, k0, wb, wh = int(ib[0]), int(ih[0]), float(wb[0]), float(wh[0])

    def vx(i, k):
        v = V[i, k]
        return SENTINEL if v == np.inf else v

    val = 0.0
    if wb < 1.0:
        if wh < 1.0:
            val = val + (1.0 - wb) * (1.0 - wh) * vx(i0, k0)
        if wh > 0.0:
            val = val + (1.0 - wb) * wh * vx(i0, k0 + 1)
    if wb > 0.0:
        if wh < 1.0:
            val = val + wb * (1.0 - wh) * vx(i0 + 1, k0)
        if wh > 0.0:
            val = val + wb * wh * vx(i0 + 1, k0 + 1)
    # a grid point whose own value is infinite stays infinite
    if wb == 0.0 and wh == 0.0:
        val = float(V[i0, k0])
    return (val, clamped) if return_flag else val


class NodeSolver:
    """Precomputed tables for one node; runs backward recursions and rollouts.

    Parameters
    ----------
    model : NodeModel
    d_hw, d_el, prob : ndarray, shape (T, K)
        Marginal noise of the node.
    price : ndarray, shape (T,)
        Stage price of the grid exchange (EUR per kW and stage).
    points : int
        State grid points per dimension.
    """

    def __init__(self, model: NodeModel, d_hw, d_el, prob, price, points: int = 51,
                 resale: bool = True, backend: str | None = None, workers: int | None = None):
        self.m = model
        self.d_hw = np.asarray(d_hw, dtype=float)
        self.d_el = np.asarray(d_el, dtype=float)
        self.prob = np.asarray(prob, dtype=float)
        self.price = np.asarray(price, dtype=float)
        self.resale = resale
        self.kernel = kernels.get_backend(backend)
        self.workers = workers or kernels.worker_count()
        self.T, self.K = self.prob.shape
        m = model
        self.b_axis = axis(m.b_max, points, m.has_battery)
        self.h_axis = axis(m.h_max, points)
        self.gb, self.gh = len(self.b_axis), len(self.h_axis)
        self.ub = m.u_b_values()
        self.ut = m.u_t_values()
        self.b_upper = m.b_max if m.has_battery else 1.0
        bn = battery_next(self.b_axis[:, None], self.ub[None, :], m) if m.has_battery \
            else np.zeros((1, 1))
        self.b_tab = interp_table(bn, self.b_upper, self.gb)
        self._h_tabs = {}
        ib, ih, k = np.meshgrid(np.arange(self.gb), np.arange(self.gh), np.arange(self.K), indexing="ij")
        self.pb = ib.ravel().astype(np.int64)
        self.ph = (k * self.gh + ih).ravel().astype(np.int64)
        self.pk = k.ravel().astype(np.int64)
        # fixed part of the balance: d_el + u_b + u_t, shape (T, K, nb, nt)
        self.base = (self.d_el[:, :, None, None] + self.ub[None, None, :, None]) + self.ut[None, None, None, :]

    def h_tab(self, t: int):
        tab = self._h_tabs.get(t)
        if tab is None:
            hn = tank_next(self.h_axis[None, :, None], self.ut[None, None, :], self.d_hw[t][:, None, None], self.m)
            lo, w, ok = interp_table(hn.reshape(self.K * self.gh, -1), self.m.h_max, self.gh)
            tab = self._h_tabs[t] = (lo, w, ok)
        return tab

    def terminal(self) -> np.ndarray:
        return np.broadcast_to(terminal_cost(self.h_axis, self.m), (self.gb, self.gh)).copy()

    def cost_table(self, t: int, mode: str, value: float) -> np.ndarray:
        """Stage cost ``(K, nb, nt)`` for price ``value`` or resource ``value``."""
        base = self.base[t]
        if mode == "price":
            _, c = price_exchange(value, self.price[t], self.m.u_ne_cap, self.resale)
            return c - value * base
        une = value + base
        cost = stage_exchange_cost(une, self.price[t], self.resale)
        return np.where(np.abs(une) <= self.m.u_ne_cap + BOX_TOL, cost, np.inf)

    def stage(self, t: int, Vnext: np.ndarray, cost: np.ndarray, report: list | None = None):
        """One Bellman step on the whole grid; returns ``V_t`` of shape ``(gb, gh)``."""
        P = len(self.pb)
        out = np.empty(P)
        ab = np.empty(P, dtype=np.int64)
        at = np.empty(P, dtype=np.int64)
        b_lo, b_w, b_ok = self.b_tab
        h_lo, h_w, h_ok = self.h_tab(t)
        self.kernel.bellman_min(np.ascontiguousarray(Vnext), b_lo, b_w, b_ok, h_lo, h_w, h_ok,
                                np.ascontiguousarray(cost), self.pb, self.ph, self.pk, SENTINEL,
                                out, ab, at, self.workers)
        best = out.reshape(self.gb, self.gh, self.K)
        if report is not None and np.isinf(best).any():
            for ib, ih, k in np.argwhere(np.isinf(best))[:20]:
                report.append((t, float(self.b_axis[ib]), float(self.h_axis[ih]), int(k)))
        return best @ self.prob[t]

    def backward(self, mode: str, process) -> ValueGrid:
        process = np.asarray(process, dtype=float)
        if process.shape != (self.T,):
            raise ValueError(f"process must have length {self.T}")
        V = np.empty((self.T + 1, self.gb, self.gh))
        V[self.T] = self.terminal()
        report = []
        for t in range(self.T - 1, -1, -1):
            V[t] = self.stage(t, V[t + 1], self.cost_table(t, mode, process[t]), report)
        if report:
            warnings.warn(f"{len(report)} (stage, state, atom) triples without admissible control",
                          RuntimeWarning, stacklevel=2)
        return ValueGrid(self.m, self.b_axis, self.h_axis, V, mode, process.copy(), report)

    def perturbed_value(self, grid: ValueGrid, t: int, delta: float, x0) -> float:
        """``V_0(x0)`` after shifting the stage ``t`` process by ``delta``.

        Only stages ``0..t`` are recomputed; the tail of ``grid`` is reused.
        """
        V = self.stage(t, grid.values[t + 1], self.cost_table(t, grid.mode, grid.process[t] + delta))
        for s in range(t - 1, -1, -1):
            V = self.stage(s, V, self.cost_table(s, grid.mode, grid.process[s]))
        tmp = ValueGrid(self.m, self.b_axis, self.h_axis, V[None], grid.mode, grid.process)
        return eval_value(tmp, 0, x0)

    # ------------------------------------------------------------ forward

    def decide(self, grid: ValueGrid, t: int, b, h, k):
        """Optimal decisions at states ``(b, h)`` for atom indices ``k``.

        Returns ``(u_b, u_t, u_ne, stage_cost)`` arrays; the stage cost is
        the exchange cost plus the coordination term.
        """
        b = np.atleast_1d(np.asarray(b, dtype=float))
        h = np.atleast_1d(np.asarray(h, dtype=float))
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        P = len(h)
        m = self.m
        if m.has_battery:
            bn = battery_next(b[:, None], self.ub[None, :], m)
        else:
            bn = np.zeros((P, 1))
        b_lo, b_w, b_ok = interp_table(bn, self.b_upper, self.gb)
        hn = tank_next(h[:, None], self.ut[None, :], self.d_hw[t][k][:, None], m)
        h_lo, h_w, h_ok = interp_table(hn, m.h_max, self.gh)
        cost = self.cost_table(t, grid.mode, grid.process[t])
        out = np.empty(P)
        ab = np.empty(P, dtype=np.int64)
        at = np.empty(P, dtype=np.int64)
        idx = np.arange(P, dtype=np.int64)
        self.kernel.bellman_min(np.ascontiguousarray(grid.values[t + 1]), b_lo, b_w, b_ok, h_lo, h_w, h_ok,
                                cost, idx, idx, k, SENTINEL, out, ab, at, self.workers)
        if np.any(ab < 0):
            bad = int(np.flatnonzero(ab < 0)[0])
            raise InfeasibleNodeError(f"no admissible control at t={t}, b={b[bad]}, h={h[bad]}, atom {k[bad]}")
        u_b = self.ub[ab]
        u_t = self.ut[at]
        base = self.d_el[t][k] + u_b + u_t
        if grid.mode == "price":
            u, _ = price_exchange(grid.process[t], self.price[t], m.u_ne_cap, self.resale)
            u_ne = np.full(P, u)
        else:
            u_ne = grid.process[t] + base
        return u_b, u_t, u_ne, cost[k, ab, at]

    def step(self, b, h, u_b, u_t, t, k):
        m = self.m
        bn = battery_next(b, u_b, m) if m.has_battery else np.zeros_like(h)
        hn = tank_next(h, u_t, self.d_hw[t][k], m)
        b_max = m.b_max if m.has_battery else 0.0
        return np.clip(bn, 0.0, b_max), np.clip(hn, 0.0, m.h_max)


@dataclass
class NodeRollout:
    """Per-stage statistics of a nodal policy: means and standard errors.

    ``delta`` is the load balance ``u_ne - d_el - u_b - u_t`` and ``dphi``
    the derivative of the exchange cost at the chosen ``u_ne``.
    """
    delta: np.ndarray
    delta_se: np.ndarray
    dphi: np.ndarray
    cost: float
    exact: bool
    samples: int


def rollout(solver: NodeSolver, grid: ValueGrid, x0, mc_samples: int = 1000, seed: int = 0,
            node_index: int = 0, exact_limit: int = EXACT_PARTICLES, force_mc: bool = False) -> NodeRollout:
    """Statistics of the tabulated nodal policy from ``x0``.

    The policy acts on grid vertices only: every state, ``x0`` included, is
    replaced by a random vertex of its grid cell drawn with the
    multilinear interpolation weights.  Expectations along this process are
    therefore the derivatives of the interpolated value ``V_0(x0)`` itself.
    The vertex distribution is propagated exactly while its support stays
    below ``exact_limit``; otherwise the policy is simulated on
    ``mc_samples`` scenarios from a substream tied to ``(seed, node_index)``
    so every call sees the same draws.
    """
    b0 = float(x0.b or 0.0) if hasattr(x0, "h") else float(x0[0])
    h0 = float(x0.h) if hasattr(x0, "h") else float(x0[1])
    if not force_mc:
        res = _rollout_exact(solver, grid, b0, h0, exact_limit)
        if res is not None:
            return res
    return _rollout_mc(solver, grid, b0, h0, mc_samples, seed, node_index)


def _cell(solver, b, h):
    """Lower vertex indices and upper weights of the grid cells holding ``(b, h)``."""
    m = solver.m
    b_max = m.b_max if m.has_battery else 0.0
    ib, wb, _ = interp_table(np.clip(b, 0.0, b_max), solver.b_upper, solver.gb)
    ih, wh, _ = interp_table(np.clip(h, 0.0, m.h_max), m.h_max, solver.gh)
    return ib, wb, ih, wh


def _split(solver, b, h, w):
    """Spread weights ``w`` of states ``(b, h)`` over grid vertices; returns ``(ib, ih, w)``."""
    ib, wb, ih, wh = _cell(solver, b, h)
    parts_b, parts_h, parts_w = [], [], []
    for db, fb in ((0, 1.0 - wb), (1, wb)):
        for dh, fh in ((0, 1.0 - wh), (1, wh)):
            ww = w * fb * fh
            keep = ww > 0.0
            parts_b.append(ib[keep] + db)
            parts_h.append(ih[keep] + dh)
            parts_w.append(ww[keep])
    ib, ih, ww = np.concatenate(parts_b), np.concatenate(parts_h), np.concatenate(parts_w)
    key = ib * solver.gh + ih
    uniq, inv = np.unique(key, return_inverse=True)
    return uniq // solver.gh, uniq % solver.gh, np.bincount(inv.ravel(), weights=ww, minlength=len(uniq))


def _rollout_exact(solver, grid, b0, h0, limit):
    T, K = solver.T, solver.K
    ib, ih, w = _split(solver, np.array([b0]), np.array([h0]), np.array([1.0]))
    delta = np.zeros(T)
    dphi = np.zeros(T)
    cost = 0.0
    for t in range(T):
        if len(w) > limit:
            return None
        P = len(w)
        bb = np.repeat(solver.b_axis[ib], K)
        hh = np.repeat(solver.h_axis[ih], K)
        kk = np.tile(np.arange(K), P)
        ww = np.repeat(w, K) * np.tile(solver.prob[t], P)
        u_b, u_t, u_ne, c = solver.decide(grid, t, bb, hh, kk)
        d = u_ne - solver.d_el[t][kk] - u_b - u_t
        delta[t] = ww @ d
        dphi[t] = ww @ exchange_derivative(u_ne, solver.price[t], solver.resale)
        cost += ww @ c
        bn, hn = solver.step(bb, hh, u_b, u_t, t, kk)
        ib, ih, w = _split(solver, bn, hn, ww)
    cost += w @ terminal_cost(solver.h_axis[ih], solver.m)
    return NodeRollout(delta, np.zeros(T), dphi, float(cost), True, 0)


def _rollout_mc(solver, grid, b0, h0, S, seed, node_index):
    T = solver.T
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17, node_index)))
    u = rng.random((S, T))
    # one uniform per dimension and stage picks the vertex of each cell
    v = rng.random((S, T + 1, 2))
    cdf = np.cumsum(solver.prob, axis=1)
    cdf[:, -1] = 1.0

    def snap(b, h, s):
        ib, wb, ih, wh = _cell(solver, b, h)
        ib = ib + (v[:, s, 0] < wb)
        ih = ih + (v[:, s, 1] < wh)
        return solver.b_axis[ib], solver.h_axis[ih]

    b, h = snap(np.full(S, b0), np.full(S, h0), 0)
    delta = np.zeros(T)
    se = np.zeros(T)
    dphi = np.zeros(T)
    total = np.zeros(S)
    for t in range(T):
        k = np.searchsorted(cdf[t], u[:, t], side="right").clip(max=solver.K - 1)
        u_b, u_t, u_ne, c = solver.decide(grid, t, b, h, k)
        d = u_ne - solver.d_el[t][k] - u_b - u_t
        delta[t] = d.mean()
        se[t] = d.std(ddof=1) / np.sqrt(S) if S > 1 else 0.0
        dphi[t] = exchange_derivative(u_ne, solver.price[t], solver.resale).mean()
        total += c
        b, h = snap(*solver.step(b, h, u_b, u_t, t, k), t + 1)
    total += terminal_cost(h, solver.m)
    return NodeRollout(delta, se, dphi, float(total.mean()), False, S)


def node_solvers(inst, backend: str | None = None, workers: int | None = None, points: int | None = None):
    """One :class:`NodeSolver` per node of an instance."""
    out = []
    for n, m in enumerate(inst.nodes):
        d_hw, d_el, prob = inst.noise.node_atoms(n)
        out.append(NodeSolver(m, d_hw, d_el, prob, inst.stage_price, points or inst.state_points,
                              inst.resale, backend, workers))
    return out


def backward_price(solver: NodeSolver, p) -> ValueGrid:
    """Nodal value functions under the stage price vector ``p``."""
    return solver.backward("price", p)


def backward_resource(solver: NodeSolver, r) -> ValueGrid:
    """Nodal value functions when the node must export ``r`` each stage."""
    return solver.backward("resource", r)
