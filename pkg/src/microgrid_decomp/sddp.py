"""Global SDDP on the full problem with stagewise resampled joint noise.

The joint noise of every stage is reduced by weighted k-means to a few
atoms.  Because the reduced law is a conditional expectation of the
original one and the stage problems are convex in the noise, the lower
bound computed on the reduced problem also bounds the original optimum.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .onestep import PolyhedralValue, StageModel, terminal_value
from .policy import Surrogate, policy_step, simulate_policy
from .uncertainty import quantize_all, sample_joint_scenarios


@dataclass
class SDDPOptions:
    """``resample_size`` atoms per stage; statistical upper bound every
    ``check_every`` iterations on ``ub_scenarios`` scenarios; stop once the
    relative gap is below ``gap_tol``."""
    max_iters: int = 300
    resample_size: int = 100
    check_every: int = 10
    ub_scenarios: int = 1000
    gap_tol: float = 0.01
    max_cuts: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "SDDPOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sddp options: {sorted(unknown)}")
        return cls(**d)


def select_cuts_level1(alpha, beta, points, max_cuts: int = 100, tie_tol: float = 1e-10):
    """Indices of the cuts attaining the maximum at some trial point.

    Ties go to the most recent cut (highest index).  When more than
    ``max_cuts`` survive, the most recent ones are kept.
    """
    alpha = np.asarray(alpha, dtype=float)
    if len(alpha) == 0:
        return np.zeros(0, dtype=np.int64)
    P = np.atleast_2d(np.asarray(points, dtype=float))
    vals = P @ np.asarray(beta, dtype=float).T + alpha[None, :]
    top = vals.max(axis=1, keepdims=True)
    close = vals >= top - tie_tol * np.maximum(1.0, np.abs(top))
    # last index among the near-maximal cuts of each point
    J = len(alpha)
    winner = J - 1 - np.argmax(close[:, ::-1], axis=1)
    keep = np.unique(winner)
    if len(keep) > max_cuts:
        keep = keep[-max_cuts:]
    return keep


class CutCollection:
    """Cuts ``alpha + beta' x`` per stage; stage ``T`` is the terminal cost."""

    def __init__(self, inst, floor):
        self.inst = inst
        self.T = inst.horizon
        d = inst.state_dim
        self.alpha = [np.array([floor[t]]) for t in range(self.T)]
        self.beta = [np.zeros((1, d)) for _ in range(self.T)]
        self.active = [np.zeros(1, dtype=np.int64) for _ in range(self.T)]
        self._terminal = terminal_value(inst)

    def add(self, t, alpha, beta):
        self.alpha[t] = np.append(self.alpha[t], alpha)
        self.beta[t] = np.vstack([self.beta[t], beta])

    def select(self, t, points, max_cuts):
        self.active[t] = select_cuts_level1(self.alpha[t], self.beta[t], points, max_cuts)

    def value_function(self, t) -> PolyhedralValue:
        if t == self.T:
            return self._terminal
        a = self.active[t]
        idx = np.arange(self.inst.state_dim)
        return PolyhedralValue([(idx, self.beta[t][a], self.alpha[t][a])])

    def evaluate(self, t, x, active_only=True):
        x = np.atleast_2d(x)
        if t == self.T:
            return self._terminal(x)
        a = self.active[t] if active_only else slice(None)
        return (x @ self.beta[t][a].T + self.alpha[t][a][None]).max(axis=1)

    def n_active(self):
        return [len(a) for a in self.active]


def stage_floor(inst):
    """Valid constant lower bounds of the value functions ``V_t``."""
    T = inst.horizon
    caps = np.array([m.u_ne_cap for m in inst.nodes])
    per = np.zeros(T)
    for t in range(T):
        if inst.resale:
            per[t] -= inst.stage_price[t] * caps.sum()
        c2, c1, c0 = inst.arc_c2[t], inst.arc_c1[t], inst.arc_c0[t]
        with np.errstate(divide="ignore"):
            per[t] += np.where(c2 > 0, c0 - c1 * c1 / (4 * np.where(c2 > 0, c2, 1.0)),
                               np.where(c1 == 0, c0, -np.inf)).sum()
    floor = np.cumsum(per[::-1])[::-1]
    if not np.all(np.isfinite(floor)):
        raise ValueError("arcs with linear transport cost make the stage problem unbounded")
    return floor


@dataclass
class SDDPTraceRow:
    iteration: int
    lower_bound: float
    ub_mean: float
    ub_ci95: float
    cuts: int
    seconds: float


@dataclass
class SDDPResult:
    cuts: CutCollection
    lower_bound: float
    stat_upper: tuple
    trace: list
    termination: str
    iterations: int
    stages: list = field(default_factory=list)

    def value_function(self, t):
        return self.cuts.value_function(t)

    @property
    def gap(self):
        ub = self.stat_upper[0]
        return (ub - self.lower_bound) / abs(ub) if np.isfinite(ub) and ub != 0 else np.inf


def _forward(inst, cuts, stages, x0, rng):
    """One sampled trajectory; returns the visited states ``x_0..x_{T-1}``."""
    T = inst.horizon
    xs = [x0.copy()]
    x = x0[None]
    for t in range(T - 1):
        jd = stages[t]
        k = rng.choice(jd.size, p=jd.prob)
        st = policy_step(inst, t, x, jd.d_hw[k:k + 1], jd.d_el[k:k + 1], cuts.value_function(t + 1))
        x = st.x_next
        xs.append(x[0].copy())
    return xs


def expected_stage_cut(inst, t, value, jd, x):
    """Averaged cut of ``V_t`` at ``x`` over the atoms of ``jd``.

    Returns ``(alpha, beta, expected_value)``.
    """
    sm = StageModel(inst, t, value)
    M = jd.size
    X = np.repeat(np.asarray(x, dtype=float)[None], M, axis=0)
    res, b = sm.solve(X, jd.d_hw, jd.d_el)
    a, g = sm.cut(res, b, X)
    val = float(jd.prob @ (res.obj + sm.const))
    return float(jd.prob @ a), jd.prob @ g, val


def backward_pass(inst, cuts: CutCollection, states, stages, trial_points=None, max_cuts=100):
    """Add one averaged cut per stage at the forward states, from the last stage back.

    ``trial_points[t]`` collects every state visited at stage ``t``; when
    given, level-one selection runs after each new cut.
    """
    T = inst.horizon
    for t in range(T - 1, -1, -1):
        a, g, _ = expected_stage_cut(inst, t, cuts.value_function(t + 1), stages[t], states[t])
        cuts.add(t, a, g)
        if trial_points is not None:
            cuts.select(t, trial_points[t], max_cuts)
        else:
            cuts.active[t] = np.arange(len(cuts.alpha[t]))
    return cuts


def statistical_upper_bound(inst, cuts, stages, count, seed, x0=None):
    sur = Surrogate("sddp", [cuts.value_function(t) for t in range(inst.horizon + 1)])
    sc = sample_joint_scenarios(stages, count, seed)
    rep = simulate_policy(inst, sur, sc, x0)
    return rep.mean, rep.ci95


def sddp_run(inst, options: SDDPOptions | dict | None = None, x0=None, callback=None) -> SDDPResult:
    """Run SDDP until the statistical gap falls below ``gap_tol`` or ``max_iters``.

    The lower bound is the largest stage-0 cut value at ``x0``, hence
    nondecreasing.  Forward passes draw one scenario per iteration from a
    generator seeded by ``options.seed``.
    """
    opts = options if isinstance(options, SDDPOptions) else SDDPOptions.from_dict(options)
    T = inst.horizon
    x0 = inst.x0_vector() if x0 is None else np.asarray(x0, dtype=float)
    stages = quantize_all(inst.noise, opts.resample_size, opts.seed)
    cuts = CutCollection(inst, stage_floor(inst))
    rng = np.random.default_rng(np.random.SeedSequence(opts.seed, spawn_key=(23,)))
    trial = [np.zeros((0, inst.state_dim)) for _ in range(T)]
    lb = -np.inf
    ub = (np.inf, np.inf)
    trace = []
    t0 = time.perf_counter()
    termination = "max iterations"
    it = 0
    for it in range(1, opts.max_iters + 1):
        states = _forward(inst, cuts, stages, x0, rng)
        for t in range(T):
            trial[t] = np.vstack([trial[t], states[t][None]])
        backward_pass(inst, cuts, states, stages, trial, opts.max_cuts)
        lb = max(lb, float(cuts.evaluate(0, x0, active_only=False)[0]))
        checked = it % opts.check_every == 0 or it == opts.max_iters
        if checked:
            ub = statistical_upper_bound(inst, cuts, stages, opts.ub_scenarios,
                                         opts.seed + 1000003 * it, x0)
        row = SDDPTraceRow(it, lb, ub[0] if checked else np.nan, ub[1] if checked else np.nan,
                           int(sum(cuts.n_active())), time.perf_counter() - t0)
        trace.append(row)
        if callback:
            callback(row)
        if checked and np.isfinite(ub[0]) and (ub[0] - lb < opts.gap_tol * abs(ub[0]) or ub[0] - lb <= 1e-9):
            termination = "gap below tolerance"
            break
    return SDDPResult(cuts, lb, ub, trace, termination, it, stages)


def write_trace(result: SDDPResult, path) -> None:
    """Iteration table without wall times."""
    with open(path, "w") as fh:
        fh.write("iter,lower_bound,ub_mean,ub_ci95,cuts\n")
        for r in result.trace:
            fh.write(f"{r.iteration},{r.lower_bound:.10g},{r.ub_mean:.10g},{r.ub_ci95:.10g},{r.cuts}\n")
