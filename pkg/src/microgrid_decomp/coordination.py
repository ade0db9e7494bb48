"""Outer coordination loops producing the decomposition bounds.

Price decomposition maximizes the dual function
``D(p) = sum_n V_n[p_n](x0_n) + sum_t min_q (l(q) + <C^T p_t, q>)``, a
lower bound of the optimal cost for any ``p``.  Resource decomposition
minimizes ``sum_n V_n[r_n](x0_n) + sum_t min {l(q) : C q = -r_t}`` over
balanced ``r``, an upper bound for any ``r``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .arc_opt import ResourceInfeasible, solve_arc_price, solve_arc_resource
from .network import project_onto_image
from .nodal_dp import EXACT_PARTICLES, eval_value, node_solvers, rollout

IM_TOL = 1e-6
FD_MAX_STAGES = 48
DEFAULT_OPTIMIZER = {"dadp": "bundle", "padp": "gradient"}


@dataclass
class CoordinationOptions:
    """Outer loop settings.

    ``tol`` is the gradient-norm threshold (default ``1e-4 T N``).
    ``optimizer`` is ``"lbfgs"``, ``"gradient"`` or ``"bundle"``; by default
    price decomposition uses the bundle method (the dual function is
    piecewise linear in practice) and resource decomposition uses projected
    gradient steps.  ``mu`` selects how the
    nodal marginal costs are obtained in resource decomposition:
    ``"fd"`` (central finite differences of the DP value, cost quadratic
    in ``T``), ``"envelope"`` (expected exchange-cost derivative along the
    policy) or ``"auto"`` (finite differences up to ``FD_MAX_STAGES``
    stages).
    """
    max_iters: int = 50
    tol: float | None = None
    optimizer: str | None = None
    memory: int = 10
    step0: float | None = None
    mc_samples: int = 1000
    seed: int = 0
    exact_limit: int = EXACT_PARTICLES
    force_mc: bool = False
    mu: str = "auto"
    fd_eps: float | None = None
    points: int | None = None
    backend: str | None = None
    workers: int | None = None

    @classmethod
    def from_dict(cls, d: dict | None) -> "CoordinationOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown coordination options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TraceRow:
    iteration: int
    bound: float
    best: float
    grad_norm: float
    step: float
    seconds: float


@dataclass
class CoordinationResult:
    method: str
    process: np.ndarray          # best p or r, shape (T, N)
    bound: float
    trace: list
    termination: str
    grids: list = field(default_factory=list)
    arc_stage_values: np.ndarray | None = None
    history: list = field(default_factory=list)   # accepted iterates


class _Evaluator:
    """Caches bound evaluations so line searches reuse DP solves."""

    def __init__(self, inst, opts: CoordinationOptions):
        self.inst = inst
        self.opts = opts
        self.solvers = node_solvers(inst, opts.backend, opts.workers, opts.points)
        self.x0 = inst.x0
        self.C = inst.topology.incidence.astype(float)
        self.cache = {}
        self.evals = 0

    def key(self, z):
        return np.asarray(z, dtype=float).tobytes()


class _PriceEvaluator(_Evaluator):
    def __call__(self, p):
        k = self.key(p)
        if k in self.cache:
            return self.cache[k]
        inst, T, N = self.inst, self.inst.horizon, self.inst.n_nodes
        P = p.reshape(T, N)
        grids = [s.backward("price", P[:, n]) for n, s in enumerate(self.solvers)]
        arc = solve_arc_price(inst.arc_c2, inst.arc_c1, inst.arc_c0, P, self.C)
        bound = sum(eval_value(g, 0, x) for g, x in zip(grids, self.x0)) + arc.value
        grad, se = estimate_price_gradient(self, grids, arc)
        self.evals += 1
        out = self.cache[k] = (float(bound), grad.ravel(), se.ravel(), grids, arc)
        return out


class _ResourceEvaluator(_Evaluator):
    def __call__(self, r):
        k = self.key(r)
        if k in self.cache:
            return self.cache[k]
        inst, T, N = self.inst, self.inst.horizon, self.inst.n_nodes
        R = r.reshape(T, N)
        try:
            arc = solve_arc_resource(inst.arc_c2, inst.arc_c1, inst.arc_c0, R, self.C)
        except ResourceInfeasible:
            out = self.cache[k] = (np.inf, np.zeros(T * N), None, None, None)
            return out
        grids = [s.backward("resource", R[:, n]) for n, s in enumerate(self.solvers)]
        vals = [eval_value(g, 0, x) for g, x in zip(grids, self.x0)]
        bound = float(sum(vals) + arc.value)
        if not np.isfinite(bound) or bound >= 1e8:
            out = self.cache[k] = (np.inf, np.zeros(T * N), None, grids, arc)
            return out
        mu = self.multipliers(grids, R)
        grad = project_onto_image(mu + arc.xi, self.inst.topology)
        self.evals += 1
        out = self.cache[k] = (bound, grad.ravel(), None, grids, arc)
        return out

    def multipliers(self, grids, R):
        T, N = R.shape
        mu = np.empty((T, N))
        for n, (s, g) in enumerate(zip(self.solvers, grids)):
            if self.opts.mu not in ("fd", "envelope", "auto"):
                raise ValueError(f"unknown multiplier option {self.opts.mu!r}")
            if self.opts.mu == "envelope" or (self.opts.mu == "auto" and T > FD_MAX_STAGES):
                mu[:, n] = rollout(s, g, self.x0[n], self.opts.mc_samples, self.opts.seed, n,
                                   self.opts.exact_limit, self.opts.force_mc).dphi
                continue
            eps = self.opts.fd_eps or 1e-3 * max(1.0, float(np.abs(s.d_el).max()))
            for t in range(T):
                up = s.perturbed_value(g, t, eps, self.x0[n])
                dn = s.perturbed_value(g, t, -eps, self.x0[n])
                mu[t, n] = (up - dn) / (2 * eps)
        return mu


def estimate_price_gradient(ev: _Evaluator, grids, arc):
    """Supergradient ``E[Delta] + C q`` of the dual function and its standard errors.

    Nodal expectations are exact when the node's state distribution can be
    propagated with at most ``exact_limit`` support points, and Monte Carlo
    estimates on common random numbers otherwise.
    """
    T, N = ev.inst.horizon, ev.inst.n_nodes
    grad = np.empty((T, N))
    se = np.zeros((T, N))
    for n, (s, g) in enumerate(zip(ev.solvers, grids)):
        ro = rollout(s, g, ev.x0[n], ev.opts.mc_samples, ev.opts.seed, n, ev.opts.exact_limit, ev.opts.force_mc)
        grad[:, n] = ro.delta
        se[:, n] = ro.delta_se
    grad += arc.q @ ev.C.T
    return grad, se


def _run(method, inst, opts, ev, x0, sign, project):
    T, N = inst.horizon, inst.n_nodes
    tol = opts.tol if opts.tol is not None else 1e-4 * T * N
    trace, history = [], []
    state = {"best": None, "t0": time.perf_counter()}

    def fg(z):
        val = ev(z)
        return sign * val[0], sign * val[1]

    def callback(k, z, f, g, step):
        bound = sign * f
        b = state["best"]
        if b is None or sign * bound < sign * b[0]:
            state["best"] = (bound, z.copy())
        trace.append(TraceRow(k, bound, state["best"][0], float(np.linalg.norm(g)), float(step),
                              time.perf_counter() - state["t0"]))
        history.append(z.reshape(T, N).copy())

    step0 = opts.step0
    if step0 is None:
        step0 = 0.5 * float(np.abs(inst.stage_price).max()) * np.sqrt(T * N) if method == "dadp" \
            else 0.5 * np.sqrt(T * N)
    optimizer = opts.optimizer or DEFAULT_OPTIMIZER[method]
    kw = dict(project=project, max_iters=opts.max_iters, gtol=tol, step0=step0, callback=callback)
    if optimizer == "lbfgs":
        res = optim.lbfgs(fg, x0.ravel(), memory=opts.memory, **kw)
    elif optimizer == "gradient":
        res = optim.gradient_descent(fg, x0.ravel(), **kw)
    elif optimizer == "bundle":
        res = optim.proximal_bundle(fg, x0.ravel(), **kw)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if state["best"] is None:
        raise RuntimeError(f"{method}: starting point has no finite bound ({res.termination})")
    bound, z = state["best"]
    # trial points rejected by the optimizer may still carry a better bound
    for key, val in ev.cache.items():
        if np.isfinite(val[0]) and sign * val[0] < sign * bound and val[3] is not None:
            bound, z = val[0], np.frombuffer(key, dtype=float).copy()
    val = ev(z)
    return CoordinationResult(method, z.reshape(T, N), bound, trace, res.termination,
                              val[3], val[4].stage_values, history)


def dadp_run(inst, options: CoordinationOptions | dict | None = None, p0=None) -> CoordinationResult:
    """Price decomposition: maximize the dual function over stage-node prices.

    The default start is ``p = -price`` at every node: with the balance
    measured as an export, a node indifferent between buying from the grid
    and from its neighbours faces exactly this multiplier.
    """
    opts = options if isinstance(options, CoordinationOptions) else CoordinationOptions.from_dict(options)
    T, N = inst.horizon, inst.n_nodes
    if p0 is None:
        p0 = -np.repeat(inst.stage_price[:, None], N, axis=1)
    ev = _PriceEvaluator(inst, opts)
    return _run("dadp", inst, opts, ev, np.asarray(p0, dtype=float).reshape(T, N), -1.0, None)


def padp_run(inst, options: CoordinationOptions | dict | None = None, r0=None) -> CoordinationResult:
    """Resource decomposition: minimize the primal bound over balanced exports."""
    opts = options if isinstance(options, CoordinationOptions) else CoordinationOptions.from_dict(options)
    T, N = inst.horizon, inst.n_nodes
    r0 = np.zeros((T, N)) if r0 is None else np.asarray(r0, dtype=float).reshape(T, N)
    if np.abs(r0.sum(axis=1)).max() > IM_TOL:
        raise ValueError("initial resource process must have zero node sums")
    topo = inst.topology

    def project(v):
        return project_onto_image(v, topo)

    ev = _ResourceEvaluator(inst, opts)
    res = _run("padp", inst, opts, ev, r0, 1.0, project)
    if np.abs(res.process.sum(axis=1)).max() > IM_TOL:
        raise RuntimeError("resource iterate left im(C)")
    return res


def price_bound(inst, p, options=None):
    """Dual bound and supergradient at a given price process."""
    opts = options if isinstance(options, CoordinationOptions) else CoordinationOptions.from_dict(options)
    ev = _PriceEvaluator(inst, opts)
    val = ev(np.asarray(p, dtype=float).ravel())
    T, N = inst.horizon, inst.n_nodes
    return val[0], val[1].reshape(T, N), val[2].reshape(T, N)


def resource_bound(inst, r, options=None):
    """Primal bound and projected gradient at a given resource process."""
    opts = options if isinstance(options, CoordinationOptions) else CoordinationOptions.from_dict(options)
    ev = _ResourceEvaluator(inst, opts)
    val = ev(np.asarray(r, dtype=float).ravel())
    T, N = inst.horizon, inst.n_nodes
    return val[0], val[1].reshape(T, N)


def write_trace(result: CoordinationResult, path) -> None:
    """Iteration table without wall times (those go to a timings file)."""
    with open(path, "w") as fh:
        fh.write("iter,bound,best,grad_norm,step\n")
        for r in result.trace:
            fh.write(f"{r.iteration},{r.bound:.10g},{r.best:.10g},{r.grad_norm:.10g},{r.step:.10g}\n")
