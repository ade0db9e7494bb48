"""Surrogate value functions, the one-step lookahead policy and its Monte Carlo evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .onestep import PolyhedralValue, StageModel, next_state, stage_cost, terminal_value
from .devices import terminal_cost

Z_CI = 1.96
MAX_FAILED_FRACTION = 1e-3


class PolicyError(RuntimeError):
    pass


# ------------------------------------------------------------ envelopes

def lower_envelope_1d(x, v):
    """Affine pieces of the lower convex envelope of points ``(x, v)``.

    Infinite values are ignored.  Returns ``(slopes, intercepts)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    keep = np.isfinite(v)
    x, v = x[keep], v[keep]
    if len(x) == 0:
        raise ValueError("no finite value to convexify")
    if len(x) == 1:
        return np.zeros(1), v.copy()
    hull = []
    for i in np.argsort(x, kind="stable"):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b when it lies on or above the chord a -> i
            if (v[b] - v[a]) * (x[i] - x[a]) >= (v[i] - v[a]) * (x[b] - x[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    s, c = [], []
    for a, b in zip(hull[:-1], hull[1:]):
        slope = (v[b] - v[a]) / (x[b] - x[a])
        s.append(slope)
        c.append(v[a] - slope * x[a])
    return np.array(s), np.array(c)


def lower_envelope_2d(X, Y, V):
    """Planes of the lower convex envelope of a 2-D grid of values.

    Returns ``(slopes (J, 2), intercepts (J,))``.
    """
    pts = np.column_stack([np.ravel(X), np.ravel(Y), np.ravel(V)])
    pts = pts[np.isfinite(pts[:, 2])]
    A = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))])
    coef = np.linalg.lstsq(A, pts[:, 2], rcond=None)[0]
    scale = max(1.0, float(np.abs(pts[:, 2]).max()))
    if np.abs(A @ coef - pts[:, 2]).max() <= 1e-10 * scale:
        return coef[None, :2], coef[2:3]
    try:
        hull = ConvexHull(pts)
    except QhullError:
        hull = ConvexHull(pts, qhull_options="QJ")
    eq = hull.equations
    low = eq[eq[:, 2] < -1e-12]
    slopes = -low[:, :2] / low[:, 2:3]
    inter = -low[:, 3] / low[:, 2]
    # the envelope must sit below every grid value
    over = (pts[:, :2] @ slopes.T + inter[None, :] - pts[:, 2:3]).max(axis=0)
    inter = inter - np.maximum(over, 0.0)
    key = np.round(np.column_stack([slopes, inter]), 12)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    return slopes[first], inter[first]


def grid_envelope(grid, t):
    """Cuts of the convexified nodal value ``V_t`` in the node's own state."""
    m = grid.model
    V = grid.values[t]
    if m.has_battery:
        Bg, Hg = np.meshgrid(grid.b_axis, grid.h_axis, indexing="ij")
        return lower_envelope_2d(Bg, Hg, V)
    s, c = lower_envelope_1d(grid.h_axis, V[0])
    return s[:, None], c


# ------------------------------------------------------------ surrogates

@dataclass
class Surrogate:
    """Cost-to-go models ``V_hat_t`` for ``t = 1..T`` (index ``t`` holds ``V_hat_t``)."""
    method: str
    values: list   # length T + 1; entry 0 unused by the policy

    def __getitem__(self, t):
        return self.values[t]

    @property
    def horizon(self):
        return len(self.values) - 1


def build_surrogate(method: str, inst, solver_output) -> Surrogate:
    """Surrogate value functions from a solver's output.

    ``solver_output`` is an SDDP result (cuts used as they are) or a
    coordination result, whose nodal grids are replaced by the cuts of
    their lower convex envelopes; the arc values of the remaining stages
    enter as constants.
    """
    T = inst.horizon
    if method == "sddp":
        vals = [solver_output.value_function(t) for t in range(T + 1)]
        return Surrogate(method, vals)
    if method not in ("dadp", "padp"):
        raise ValueError(f"unknown method {method!r}")
    grids = solver_output.grids
    arc = solver_output.arc_stage_values
    if grids is None or len(grids) != inst.n_nodes:
        raise ValueError("coordination result carries no nodal grids")
    slices = inst.state_slices()
    vals = []
    for t in range(T + 1):
        if any(g.values.shape[0] <= t for g in grids):
            raise ValueError(f"stage {t} missing from the nodal grids")
        if t == T:
            vals.append(terminal_value(inst))
            continue
        blocks = []
        for n, g in enumerate(grids):
            ib, ih = slices[n]
            idx = np.array([ib, ih]) if ib is not None else np.array([ih])
            s, c = grid_envelope(g, t)
            blocks.append((idx, s, c))
        vals.append(PolyhedralValue(blocks, float(arc[t:].sum())))
    return Surrogate(method, vals)


# ------------------------------------------------------------ policy

@dataclass
class StepResult:
    u_b: np.ndarray
    u_t: np.ndarray
    u_ne: np.ndarray
    f: np.ndarray
    q: np.ndarray
    cost: np.ndarray
    x_next: np.ndarray


def _net_battery(inst, model, up, um, u_t, x, d_hw, value):
    """Remove simultaneous charge and discharge when it does not raise the objective."""
    both = np.minimum(up, um)
    if not np.any(both > 0):
        return up, um
    up2, um2 = up - both, um - both
    try:
        x_old = next_state(inst, x, up, um, u_t, d_hw)
        x_new = next_state(inst, x, up2, um2, u_t, d_hw)
    except Exception:
        return up, um
    ok = value(x_new) <= value(x_old) + 1e-12
    fits = np.ones(len(x), dtype=bool)
    for n, (ib, _) in enumerate(inst.state_slices()):
        if ib is not None:
            fits &= x_new[:, ib] <= inst.nodes[n].b_max
    ok &= fits
    return np.where(ok[:, None], up2, up), np.where(ok[:, None], um2, um)


def policy_step(inst, t: int, x, d_hw, d_el, value: PolyhedralValue, model: StageModel | None = None) -> StepResult:
    """Stage decision of the lookahead policy for a batch of states and noises.

    Minimizes exchange and transport costs plus ``value`` at the next state.
    ``x`` is ``(K, state_dim)``; ``d_hw`` and ``d_el`` are ``(K, N)``.
    """
    model = model or StageModel(inst, t, value)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d_hw = np.atleast_2d(d_hw)
    d_el = np.atleast_2d(d_el)
    res, _ = model.solve(x, d_hw, d_el)
    up, um, u_t, u_ne, q = model.decisions(res.z)
    up, um = _net_battery(inst, model, up, um, u_t, x, d_hw, value)
    u_b = up - um
    xn = next_state(inst, x, up, um, u_t, d_hw)
    f = u_ne - d_el - u_b - u_t
    return StepResult(u_b, u_t, u_ne, f, q, stage_cost(inst, t, u_ne, q), xn)


@dataclass
class SimulationReport:
    method: str
    costs: np.ndarray          # per scenario, EUR
    node_costs: np.ndarray     # (S, N) exchange plus terminal cost per node
    kirchhoff_residual: float  # max |C q + f| over all stages and scenarios
    balance_residual: float
    failed: int

    @property
    def mean(self) -> float:
        return float(self.costs.mean())

    @property
    def ci95(self) -> float:
        n = len(self.costs)
        return float(Z_CI * self.costs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def simulate_policy(inst, surrogate: Surrogate, scenarios, x0=None, batch: int = 500) -> SimulationReport:
    """Roll the lookahead policy forward on every scenario from ``x0``.

    Scenarios are processed in fixed-size batches in order, so results do
    not depend on how the work is scheduled.
    """
    T, N = inst.horizon, inst.n_nodes
    S = len(scenarios)
    x0 = inst.x0_vector() if x0 is None else np.asarray(x0, dtype=float)
    C = inst.topology.incidence.astype(float)
    models = [StageModel(inst, t, surrogate[t + 1]) for t in range(T)]
    costs = np.zeros(S)
    node_costs = np.zeros((S, N))
    failed = np.zeros(S, dtype=bool)
    kres = 0.0
    bres = 0.0
    price = inst.stage_price
    for s0 in range(0, S, batch):
        sl = slice(s0, min(S, s0 + batch))
        K = sl.stop - sl.start
        x = np.repeat(x0[None], K, axis=0)
        alive = np.ones(K, dtype=bool)
        for t in range(T):
            d_hw = scenarios.d_hw[sl, t]
            d_el = scenarios.d_el[sl, t]
            try:
                st = policy_step(inst, t, x, d_hw, d_el, surrogate[t + 1], models[t])
            except Exception:
                # fall back to one scenario at a time to isolate failures
                st = None
            if st is None:
                for k in np.flatnonzero(alive):
                    try:
                        one = policy_step(inst, t, x[k:k + 1], d_hw[k:k + 1], d_el[k:k + 1],
                                          surrogate[t + 1], models[t])
                    except Exception:
                        alive[k] = False
                        continue
                    x[k] = one.x_next[0]
                    costs[s0 + k] += one.cost[0]
                continue
            kres = max(kres, float(np.abs(st.q @ C.T + st.f)[alive].max()))
            bres = max(bres, float(np.abs(st.f - (st.u_ne - d_el - st.u_b - st.u_t))[alive].max()))
            costs[sl] += np.where(alive, st.cost, 0.0)
            node_costs[sl] += np.where(alive[:, None], price[t] * (st.u_ne if inst.resale
                                                                   else np.maximum(st.u_ne, 0.0)), 0.0)
            x = np.where(alive[:, None], st.x_next, x)
        for n, (ib, ih) in enumerate(inst.state_slices()):
            tc = terminal_cost(x[:, ih], inst.nodes[n])
            costs[sl] += tc
            node_costs[sl, n] += tc
        failed[sl] = ~alive
    n_failed = int(failed.sum())
    if n_failed > MAX_FAILED_FRACTION * S:
        raise PolicyError(f"{n_failed} of {S} scenarios failed")
    keep = ~failed
    return SimulationReport(surrogate.method, costs[keep], node_costs[keep], kres, bres, n_failed)
