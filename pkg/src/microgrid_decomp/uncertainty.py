"""Finite stagewise-independent noise: synthetic demands, sampling, quantization.

Stage index ``t`` in ``[0, T-1]`` refers to the noise ``W_{t+1}`` observed
during ``[t, t+1)`` before the stage decision (hazard-decision).  Each noise
atom is a pair ``(d_hw, d_el)`` in kW: hot water draw and net electric demand
(demand minus solar production, possibly negative).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

MAX_EXACT_JOINT = 10**6
JOINT_SAMPLE_SIZE = 10_000
# joint supports up to this size are quantized exactly, larger ones from samples
QUANTIZE_EXACT = 10_000


@dataclass
class NoiseModel:
    """Node-wise independent marginals, arrays of shape ``(T, N, K)``."""
    d_hw: np.ndarray
    d_el: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.d_hw = np.asarray(self.d_hw, dtype=float)
        self.d_el = np.asarray(self.d_el, dtype=float)
        self.prob = np.asarray(self.prob, dtype=float)
        if not (self.d_hw.shape == self.d_el.shape == self.prob.shape) or self.prob.ndim != 3:
            raise ValueError("d_hw, d_el and prob must share a (T, N, K) shape")
        if np.any(self.prob <= 0):
            raise ValueError("atom probabilities must be positive")
        if np.any(np.abs(self.prob.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("probabilities must sum to one for every (stage, node)")
        if np.any(self.d_hw < 0):
            raise ValueError("hot water demand atoms must be nonnegative")

    @property
    def horizon(self) -> int:
        return self.prob.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.prob.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.prob.shape[2]

    def node_atoms(self, n: int):
        """Marginal of node ``n`` as ``(d_hw, d_el, prob)`` arrays of shape ``(T, K)``."""
        return self.d_hw[:, n, :], self.d_el[:, n, :], self.prob[:, n, :]

    def joint_size(self, t: int) -> int:
        return self.n_atoms ** self.n_nodes

    def joint(self, t: int) -> "JointDistribution":
        """Exact product distribution of the stage ``t`` noise across nodes."""
        N, K = self.n_nodes, self.n_atoms
        if K ** N > MAX_EXACT_JOINT:
            raise ValueError(f"joint support {K}^{N} too large to enumerate")
        idx = np.array(list(itertools.product(range(K), repeat=N)), dtype=np.int64).reshape(-1, N)
        nodes = np.arange(N)
        return JointDistribution(self.d_hw[t][nodes, idx], self.d_el[t][nodes, idx],
                                 np.prod(self.prob[t][nodes, idx], axis=1))

    def mean(self):
        """Per-(stage, node) mean of ``(d_hw, d_el)``."""
        return (self.d_hw * self.prob).sum(axis=2), (self.d_el * self.prob).sum(axis=2)

    def to_dict(self) -> dict:
        return {"format": "microgrid-noise", "version": 1,
                "d_hw": self.d_hw.tolist(), "d_el": self.d_el.tolist(), "prob": self.prob.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(np.array(data["d_hw"]), np.array(data["d_el"]), np.array(data["prob"]))


@dataclass
class JointDistribution:
    """Joint noise of one stage: ``M`` atoms over ``N`` nodes."""
    d_hw: np.ndarray  # (M, N)
    d_el: np.ndarray  # (M, N)
    prob: np.ndarray  # (M,)

    @property
    def size(self) -> int:
        return len(self.prob)

    def points(self) -> np.ndarray:
        return np.concatenate([self.d_hw, self.d_el], axis=1)

    @classmethod
    def from_points(cls, pts, prob) -> "JointDistribution":
        pts = np.asarray(pts, dtype=float)
        N = pts.shape[1] // 2
        return cls(pts[:, :N].copy(), pts[:, N:].copy(), np.asarray(prob, dtype=float))

    def mean(self) -> np.ndarray:
        return self.prob @ self.points()


@dataclass
class ScenarioSet:
    """Independent draws of the whole noise process, arrays ``(S, T, N)``."""
    d_hw: np.ndarray
    d_el: np.ndarray
    atom_index: np.ndarray | None = None

    def __len__(self):
        return self.d_hw.shape[0]

    def __getitem__(self, i) -> dict:
        from .devices import NodalNoise
        S, T, N = self.d_hw.shape
        return {(t, n): NodalNoise(float(self.d_hw[i, t, n]), float(self.d_el[i, t, n]))
                for t in range(T) for n in range(N)}


@dataclass
class SyntheticParams:
    """Shape of the synthetic daily profiles (hours are local time)."""
    start_hour: float = 0.0
    el_base: float = 0.5
    el_amp: float = 0.35
    el_peak_hour: float = 19.0
    pv_peak: float = 2.2
    sunrise: float = 6.0
    sunset: float = 21.0
    hw_base: float = 0.05
    hw_morning: float = 1.4
    hw_morning_hour: float = 7.5
    hw_evening: float = 1.1
    hw_evening_hour: float = 20.0
    hw_width: float = 1.0
    rel_noise: float = 0.35
    samples: int = 200
    hw_fraction_cap: float = 0.9


def _bump(hour, centre, width):
    d = (hour - centre + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def build_synthetic_noise(node_models, T: int, k: int, seed: int,
                          params: SyntheticParams | None = None) -> NoiseModel:
    """Diurnal synthetic demands quantized to ``k`` atoms per (stage, node).

    Electric demand follows a sinusoid peaking in the evening; solar nodes
    subtract a midday production bump.  Hot water draws have morning and
    evening peaks.  Each marginal is perturbed by multiplicative noise and
    reduced to ``k`` atoms with weighted k-means.
    """
    if k < 1 or T < 1:
        raise ValueError("need k >= 1 and T >= 1")
    p = params or SyntheticParams()
    N = len(node_models)
    d_hw = np.empty((T, N, k))
    d_el = np.empty((T, N, k))
    prob = np.empty((T, N, k))
    streams = np.random.SeedSequence(seed).spawn(N)
    for n, m in enumerate(node_models):
        rng = np.random.default_rng(streams[n])
        scale = rng.uniform(0.7, 1.3)
        shift = rng.uniform(-1.0, 1.0)
        hw_cap = p.hw_fraction_cap * m.beta_h * m.u_t_max
        for t in range(T):
            hour = p.start_hour + (t + 0.5) * m.delta_t
            el = scale * (p.el_base + p.el_amp * np.cos(2 * np.pi * (hour - p.el_peak_hour - shift) / 24.0))
            pv = 0.0
            if m.has_solar and p.sunrise < hour % 24.0 < p.sunset:
                pv = p.pv_peak * np.sin(np.pi * (hour % 24.0 - p.sunrise) / (p.sunset - p.sunrise)) ** 2
            hw = scale * (p.hw_base + p.hw_morning * _bump(hour, p.hw_morning_hour + shift, p.hw_width)
                          + p.hw_evening * _bump(hour, p.hw_evening_hour + shift, p.hw_width))
            eps = rng.normal(0.0, p.rel_noise, size=(p.samples, 3))
            s_el = el * np.exp(eps[:, 0] - 0.5 * p.rel_noise ** 2)
            s_pv = pv * np.clip(1.0 + eps[:, 1], 0.0, None)
            s_hw = np.clip(hw * np.exp(eps[:, 2] - 0.5 * p.rel_noise ** 2), 0.0, hw_cap)
            pts = np.column_stack([s_hw, s_el - s_pv])
            if k == 1:
                cent, w = pts.mean(axis=0, keepdims=True), np.ones(1)
            else:
                cent, w = weighted_kmeans(pts, np.full(len(pts), 1.0 / len(pts)), k,
                                          seed=int(rng.integers(2**31)))
            order = np.lexsort((cent[:, 0], cent[:, 1]))
            d_hw[t, n], d_el[t, n] = cent[order, 0], cent[order, 1]
            prob[t, n] = w[order] / w.sum()
    return NoiseModel(d_hw, d_el, prob)


def scenario_rng(seed: int, i: int) -> np.random.Generator:
    """Independent substream for scenario ``i``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def sample_scenarios(model: NoiseModel, count: int, seed: int) -> ScenarioSet:
    """I.i.d. scenarios from the product distribution, one substream each."""
    if count < 1:
        raise ValueError("count must be >= 1")
    T, N, K = model.prob.shape
    cdf = np.cumsum(model.prob, axis=2)
    cdf[..., -1] = 1.0
    u = np.stack([scenario_rng(seed, i).random((T, N)) for i in range(count)])
    idx = (u[..., None] >= cdf[None]).sum(axis=3).clip(max=K - 1)
    t_ix = np.arange(T)[None, :, None]
    n_ix = np.arange(N)[None, None, :]
    return ScenarioSet(model.d_hw[t_ix, n_ix, idx], model.d_el[t_ix, n_ix, idx], idx)


def sample_joint_scenarios(stages: list, count: int, seed: int) -> ScenarioSet:
    """Scenarios from per-stage joint distributions (e.g. after quantization)."""
    T = len(stages)
    N = stages[0].d_hw.shape[1]
    u = np.stack([scenario_rng(seed, i).random(T) for i in range(count)])
    idx = np.empty((count, T), dtype=np.int64)
    d_hw = np.empty((count, T, N))
    d_el = np.empty((count, T, N))
    for t, jd in enumerate(stages):
        cdf = np.cumsum(jd.prob)
        cdf[-1] = 1.0
        idx[:, t] = np.searchsorted(cdf, u[:, t], side="right").clip(max=jd.size - 1)
        d_hw[:, t] = jd.d_hw[idx[:, t]]
        d_el[:, t] = jd.d_el[idx[:, t]]
    return ScenarioSet(d_hw, d_el, idx)


def weighted_kmeans(points, weights, m: int, seed: int = 0, max_iter: int = 50, tol: float = 1e-8):
    """Lloyd iterations on weighted points.

    Returns ``(centroids, masses)``; every centroid is the weighted mean of
    the points assigned to it, so the quantized law is a contraction of the
    original one in the convex order.
    """
    X = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    nz = np.flatnonzero(w > 0)
    pick = rng.choice(nz, size=m, replace=False, p=w[nz] / w[nz].sum())
    C = X[pick].copy()
    scale = max(np.abs(X).max(), 1.0)
    labels = None
    xx = (X * X).sum(axis=1)[:, None]
    for _ in range(max_iter):
        d2 = np.maximum(xx - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :], 0.0)
        labels = d2.argmin(axis=1)
        mass = np.bincount(labels, weights=w, minlength=m)
        empty = np.flatnonzero(mass <= 0)
        for j in empty:
            # re-seed on the point with the worst weighted distortion
            far = int(np.argmax(w * d2[np.arange(len(X)), labels]))
            labels[far] = j
            mass = np.bincount(labels, weights=w, minlength=m)
        sums = np.stack([np.bincount(labels, weights=w * X[:, d], minlength=m) for d in range(X.shape[1])],
                        axis=1)
        # a cluster can stay empty when points repeat; it keeps its centre and gets no mass
        full = mass > 0
        newC = C.copy()
        newC[full] = sums[full] / mass[full, None]
        shift = np.abs(newC - C).max() / scale
        C = newC
        if shift < tol:
            break
    mass = np.bincount(labels, weights=w, minlength=m)
    return C, mass


def kmeans_quantize(model: NoiseModel, t: int, target_size: int, seed: int = 0,
                    max_exact: int = QUANTIZE_EXACT, n_sample: int = JOINT_SAMPLE_SIZE) -> JointDistribution:
    """Reduce the stage ``t`` joint noise to ``target_size`` atoms.

    The product support is enumerated when it has at most ``max_exact``
    atoms; otherwise ``n_sample`` weighted draws stand in for it.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    N, K = model.n_nodes, model.n_atoms
    size = K ** N
    if size <= max_exact:
        jd = model.joint(t)
        if size <= target_size:
            return jd
        pts, w = jd.points(), jd.prob
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 1)))
        cdf = np.cumsum(model.prob[t], axis=1)
        u = rng.random((n_sample, N))
        idx = (u[:, :, None] >= cdf[None]).sum(axis=2).clip(max=K - 1)
        nodes = np.arange(N)
        pts = np.concatenate([model.d_hw[t][nodes, idx], model.d_el[t][nodes, idx]], axis=1)
        w = np.full(n_sample, 1.0 / n_sample)
    cent, mass = weighted_kmeans(pts, w, target_size, seed=seed + 7919 * t)
    keep = mass > 0
    mass = mass[keep] / mass[keep].sum()
    return JointDistribution.from_points(cent[keep], mass)


def quantize_all(model: NoiseModel, target_size: int, seed: int = 0, **kw) -> list:
    return [kmeans_quantize(model, t, target_size, seed, **kw) for t in range(model.horizon)]


def exact_joint_all(model: NoiseModel) -> list:
    return [model.joint(t) for t in range(model.horizon)]


def degenerate_noise(d_hw, d_el) -> NoiseModel:
    """Single-atom (deterministic) noise from ``(T, N)`` arrays."""
    d_hw = np.asarray(d_hw, dtype=float)[..., None]
    return NoiseModel(d_hw, np.asarray(d_el, dtype=float)[..., None], np.ones_like(d_hw))
