"""Problem instances: topology, devices, tariff, arc costs, noise and x0.

An instance is stored as a JSON document.  Generated instances are written
in resolved form (explicit arcs and noise atoms) so runs are replayable
without the generator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .devices import NodalState, NodeModel
from .network import NetworkTopology, make_topology
from .uncertainty import NoiseModel, SyntheticParams, build_synthetic_noise

FORMAT = "microgrid-instance"
VERSION = 1


class ConfigError(ValueError):
    """Invalid instance document; ``keys`` lists the offending entries."""

    def __init__(self, problems):
        self.keys = [k for k, _ in problems]
        super().__init__("invalid instance configuration:\n" +
                         "\n".join(f"  {k}: {msg}" for k, msg in problems))


@dataclass
class Instance:
    topology: NetworkTopology
    nodes: tuple
    tariff: np.ndarray                 # EUR/kWh, shape (T,)
    arc_c2: np.ndarray                 # per-stage arc cost coefficients, (T, A)
    arc_c1: np.ndarray
    arc_c0: np.ndarray
    noise: NoiseModel
    b0: np.ndarray                     # (N,), ignored for nodes without battery
    h0: np.ndarray
    delta_t: float = 0.25
    resale: bool = True
    state_points: int = 51
    name: str = "instance"
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.tariff = np.asarray(self.tariff, dtype=float)
        T, A = len(self.tariff), self.topology.n_arcs
        self.arc_c2 = np.broadcast_to(np.asarray(self.arc_c2, dtype=float), (T, A)).copy()
        self.arc_c1 = np.broadcast_to(np.asarray(self.arc_c1, dtype=float), (T, A)).copy()
        self.arc_c0 = np.broadcast_to(np.asarray(self.arc_c0, dtype=float), (T, A)).copy()
        self.b0 = np.asarray(self.b0, dtype=float)
        self.h0 = np.asarray(self.h0, dtype=float)
        problems = _check(self)
        if problems:
            raise ConfigError(problems)

    @property
    def horizon(self) -> int:
        return len(self.tariff)

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    @property
    def n_arcs(self) -> int:
        return self.topology.n_arcs

    @property
    def stage_price(self) -> np.ndarray:
        """Price of one kW held during a stage, EUR/kW."""
        return self.tariff * self.delta_t

    @property
    def x0(self) -> list:
        return [NodalState(h=float(self.h0[n]), b=float(self.b0[n]) if m.has_battery else None)
                for n, m in enumerate(self.nodes)]

    def state_slices(self) -> list:
        """Per node, ``(b_index or None, h_index)`` into the flat global state."""
        out, k = [], 0
        for m in self.nodes:
            if m.has_battery:
                out.append((k, k + 1))
                k += 2
            else:
                out.append((None, k))
                k += 1
        return out

    @property
    def state_dim(self) -> int:
        return sum(m.state_dim for m in self.nodes)

    def x0_vector(self) -> np.ndarray:
        v = []
        for n, m in enumerate(self.nodes):
            if m.has_battery:
                v.append(self.b0[n])
            v.append(self.h0[n])
        return np.array(v, dtype=float)

    def replace(self, **kw) -> "Instance":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION, "name": self.name,
            "horizon": self.horizon, "delta_t": self.delta_t, "resale": self.resale,
            "state_points": self.state_points,
            "topology": self.topology.to_dict(),
            "nodes": [_node_to_dict(m) for m in self.nodes],
            "tariff": self.tariff.tolist(),
            "arc_costs": {"c2": self.arc_c2.tolist(), "c1": self.arc_c1.tolist(), "c0": self.arc_c0.tolist()},
            "noise": self.noise.to_dict(),
            "x0": {"b": self.b0.tolist(), "h": self.h0.tolist()},
            "solver": self.solver,
        }


def _node_to_dict(m: NodeModel) -> dict:
    d = asdict(m)
    for k in ("u_b_grid", "u_t_grid"):
        if d[k] is None:
            del d[k]
        else:
            d[k] = list(d[k])
    return d


def _check(inst: Instance) -> list:
    problems = []
    N, T = inst.topology.n_nodes, len(inst.tariff)
    if T < 1:
        problems.append(("tariff", "horizon must be >= 1"))
    if len(inst.nodes) != N:
        problems.append(("nodes", f"expected {N} node models, got {len(inst.nodes)}"))
    if inst.noise.prob.shape[:2] != (T, N):
        problems.append(("noise", f"noise shape {inst.noise.prob.shape[:2]} does not match (T, N) = {(T, N)}"))
    if np.any(inst.arc_c2 <= 0):
        problems.append(("arc_costs.c2", "quadratic coefficients must be positive"))
    if inst.b0.shape != (N,) or inst.h0.shape != (N,):
        problems.append(("x0", f"x0.b and x0.h need {N} entries"))
    elif len(inst.nodes) == N:
        for n, m in enumerate(inst.nodes):
            if not 0 <= inst.h0[n] <= m.h_max:
                problems.append((f"x0.h[{n}]", "outside [0, h_max]"))
            if m.has_battery and not 0 <= inst.b0[n] <= m.b_max:
                problems.append((f"x0.b[{n}]", "outside [0, b_max]"))
            if abs(m.delta_t - inst.delta_t) > 1e-12:
                problems.append((f"nodes[{n}].delta_t", "must equal the instance delta_t"))
    if inst.state_points < 2:
        problems.append(("state_points", "need at least 2 grid points per dimension"))
    return problems


def day_night_tariff(T: int, delta_t: float = 0.25, day: float = 0.18, night: float = 0.12,
                     night_start: float = 22.0, night_end: float = 6.0, start_hour: float = 0.0) -> np.ndarray:
    """Two-level tariff in EUR/kWh."""
    hour = (start_hour + (np.arange(T) + 0.5) * delta_t) % 24.0
    is_night = (hour >= night_start) | (hour < night_end)
    return np.where(is_night, night, day)


def place_devices(topology: NetworkTopology, seed: int):
    """Battery and solar node indices: a third of the nodes each.

    Solar panels go to nodes adjacent to at least one battery whenever the
    graph allows it.
    """
    N = topology.n_nodes
    n_dev = max(1, N // 3)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    batteries = sorted(rng.choice(N, size=n_dev, replace=False).tolist())
    others = [i for i in range(N) if i not in batteries]
    near = [i for i in others if any(j in batteries for j in topology.neighbours(i))]
    far = [i for i in others if i not in near]
    near = [near[k] for k in rng.permutation(len(near))]
    far = [far[k] for k in rng.permutation(len(far))]
    solar = sorted((near + far)[:min(n_dev, len(others))])
    return batteries, solar


def generate_instance(n_nodes: int, seed: int = 0, T: int = 96, atoms: int = 10,
                      delta_t: float = 0.25, state_points: int = 51, n_controls: int = 21,
                      resale: bool = True, c2: float = 0.1, c1: float = 0.01, c0: float = 0.0,
                      params: SyntheticParams | None = None, name: str | None = None,
                      **node_kw) -> Instance:
    """Synthetic instance with the reference device placement.

    Every node has a hot water tank; a third have a 3 kWh battery and
    another third solar panels.  The terminal penalty weight defaults to
    ten times the largest tariff.
    """
    topo = make_topology(n_nodes, seed)
    tariff = day_night_tariff(T, delta_t)
    batteries, solar = place_devices(topo, seed)
    kw = dict(kappa=10.0 * float(tariff.max()), delta_t=delta_t, n_controls=n_controls)
    kw.update(node_kw)
    nodes = [NodeModel(has_battery=i in batteries, has_solar=i in solar, **kw) for i in range(n_nodes)]
    noise = build_synthetic_noise(nodes, T, atoms, seed, params)
    b0 = np.zeros(n_nodes)
    h0 = np.array([m.h_ref for m in nodes])
    return Instance(topo, nodes, tariff, c2, c1, c0, noise, b0, h0, delta_t=delta_t, resale=resale,
                    state_points=state_points, name=name or f"{n_nodes}-nodes-seed{seed}")


def tiny_lattice_instance(seed: int, n_nodes: int | None = None, T: int | None = None,
                          atoms: int | None = None, resale: bool | None = None,
                          refine: int = 1) -> Instance:
    """Random tiny instance whose reachable states all lie on the DP grid.

    Storage is lossless, grids have 0.5 kWh spacing and every control and
    hot water draw moves the state by a multiple of the spacing, so grid DP
    is exact for the discretized-control problem.  Used to compare DP bounds
    with exhaustive enumeration without interpolation error.

    ``refine`` divides the lattice spacing and the control steps by an
    integer factor; finer control grids make the discretized problem
    closer to its convex relaxation.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    N = int(n_nodes or rng.integers(2, 4))
    T = int(T or rng.integers(1, 4))
    K = int(atoms or rng.integers(1, 4))
    resale = bool(rng.random() < 0.5) if resale is None else resale
    topo = make_topology(N, seed)
    bat = int(rng.integers(N))
    nodes = []
    for n in range(N):
        lossy = rng.random() < 0.5
        nodes.append(NodeModel(
            has_battery=n == bat, has_solar=False, alpha_b=1.0, alpha_h=1.0, beta_h=1.0,
            rho_c=0.5 if lossy else 1.0, rho_d=0.5 if lossy else 1.0,
            b_max=2.0, u_b_max=4.0 if lossy else 2.0, h_max=2.0, u_t_max=2.0,
            u_b_grid=_lattice_battery_grid(lossy, refine),
            u_t_grid=tuple(np.linspace(0.0, 2.0, 2 * refine + 1)),
            kappa=float(rng.uniform(0.5, 2.0)), h_ref=float(rng.choice([0.5, 1.0, 1.5])),
            delta_t=0.5, u_ne_cap=20.0))
    d_hw = rng.integers(0, 3, size=(T, N, K)).astype(float)
    d_el = np.round(rng.uniform(-1.0, 2.0, size=(T, N, K)), 3)
    prob = rng.uniform(0.2, 1.0, size=(T, N, K))
    prob /= prob.sum(axis=2, keepdims=True)
    noise = NoiseModel(d_hw, d_el, prob)
    tariff = np.round(rng.uniform(0.1, 0.3, size=T), 3)
    A = topo.n_arcs
    c2 = np.round(rng.uniform(0.05, 0.3, size=A), 3)
    c1 = np.round(rng.uniform(-0.05, 0.05, size=A), 3)
    b0 = np.full(N, float(rng.choice([0.0, 1.0, 2.0])))
    h0 = rng.choice([0.5, 1.0, 1.5, 2.0], size=N).astype(float)
    return Instance(topo, nodes, tariff, c2, c1, 0.0, noise, b0, h0, delta_t=0.5,
                    resale=resale, state_points=4 * refine + 1, name=f"tiny-{seed}")


def _lattice_battery_grid(lossy: bool, refine: int) -> tuple:
    # lossy: charging moves 0.25 u, discharging moves u (rho = 0.5, delta_t = 0.5)
    if lossy:
        down = np.linspace(-1.0, 0.0, 2 * refine + 1)
        up = np.linspace(0.0, 4.0, 2 * refine + 1)[1:]
    else:
        down = np.linspace(-2.0, 0.0, 2 * refine + 1)
        up = np.linspace(0.0, 2.0, 2 * refine + 1)[1:]
    return tuple(np.concatenate([down, up]))


# ---------------------------------------------------------------- JSON I/O

_TOP_KEYS = {"format", "version", "name", "horizon", "delta_t", "resale", "state_points",
             "topology", "nodes", "tariff", "arc_costs", "noise", "x0", "solver", "seed"}
_NODE_KEYS = {f.name for f in fields(NodeModel)}


def instance_from_dict(data: dict) -> Instance:
    """Build an instance from a configuration document.

    ``topology`` is either explicit (``nodes`` and ``arcs``) or
    ``{"generate": {"n_nodes": n, "seed": s}}``; ``noise`` is either a
    resolved atom table or ``{"synthetic": {"atoms": k, "seed": s, ...}}``;
    ``tariff`` is a list or ``{"day": .., "night": ..}``.  Every problem
    found is reported at once.
    """
    problems = []
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "expected a JSON object")])
    for k in sorted(set(data) - _TOP_KEYS):
        problems.append((k, "unknown key"))
    for k in ("topology", "nodes"):
        if k not in data:
            problems.append((k, "missing required key"))
    if data.get("format", FORMAT) != FORMAT:
        problems.append(("format", f"expected {FORMAT!r}"))
    if any(k in ("topology", "nodes", "format") for k, _ in problems):
        raise ConfigError(problems)

    delta_t = float(data.get("delta_t", 0.25))
    topo_spec = data["topology"]
    try:
        if "generate" in topo_spec:
            g = topo_spec["generate"]
            topo = make_topology(int(g["n_nodes"]), int(g.get("seed", 0)), g.get("n_arcs"))
        else:
            topo = NetworkTopology.from_lists(topo_spec["nodes"], [tuple(a) for a in topo_spec["arcs"]])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError([("topology", str(e))]) from None
    N = topo.n_nodes

    nodes = []
    raw_nodes = data["nodes"]
    if isinstance(raw_nodes, dict):
        raw_nodes = [raw_nodes] * N
    if len(raw_nodes) != N:
        problems.append(("nodes", f"expected {N} entries, got {len(raw_nodes)}"))
    for i, nd in enumerate(raw_nodes):
        bad = sorted(set(nd) - _NODE_KEYS)
        for k in bad:
            problems.append((f"nodes[{i}].{k}", "unknown key"))
        if bad:
            continue
        nd = dict(nd)
        nd.setdefault("delta_t", delta_t)
        for k in ("u_b_grid", "u_t_grid"):
            if nd.get(k) is not None:
                nd[k] = tuple(float(v) for v in nd[k])
        try:
            nodes.append(NodeModel(**nd))
        except (TypeError, ValueError) as e:
            problems.append((f"nodes[{i}]", str(e)))

    T = data.get("horizon")
    tariff_spec = data.get("tariff", {})
    if isinstance(tariff_spec, dict):
        if T is None:
            problems.append(("horizon", "required when the tariff is not an explicit list"))
            T = 1
        tariff = day_night_tariff(int(T), delta_t, **tariff_spec)
    else:
        tariff = np.asarray(tariff_spec, dtype=float)
        if T is not None and len(tariff) != int(T):
            problems.append(("tariff", f"length {len(tariff)} differs from horizon {T}"))
    T = len(tariff)
    if T < 1:
        problems.append(("horizon", "must be >= 1"))

    arc = data.get("arc_costs", {})
    for k in sorted(set(arc) - {"c2", "c1", "c0"}):
        problems.append((f"arc_costs.{k}", "unknown key"))
    c2, c1, c0 = arc.get("c2", 0.1), arc.get("c1", 0.01), arc.get("c0", 0.0)

    noise_spec = data.get("noise")
    noise = None
    if noise_spec is None:
        problems.append(("noise", "missing required key"))
    elif "synthetic" in noise_spec:
        syn = dict(noise_spec["synthetic"])
        k = int(syn.pop("atoms", 10))
        s = int(syn.pop("seed", data.get("seed", 0)))
        try:
            params = SyntheticParams(**syn)
        except TypeError as e:
            problems.append(("noise.synthetic", str(e)))
            params = SyntheticParams()
        if len(nodes) == N:
            noise = build_synthetic_noise(nodes, T, k, s, params)
    else:
        try:
            noise = NoiseModel.from_dict(noise_spec)
        except (KeyError, ValueError) as e:
            problems.append(("noise", str(e)))

    x0 = data.get("x0", {})
    b0 = np.asarray(x0.get("b", [0.0] * N), dtype=float)
    h0 = np.asarray(x0.get("h", [m.h_ref for m in nodes] if len(nodes) == N else [0.0] * N), dtype=float)
    if problems:
        raise ConfigError(problems)
    return Instance(topo, nodes, tariff, c2, c1, c0, noise, b0, h0, delta_t=delta_t,
                    resale=bool(data.get("resale", True)), state_points=int(data.get("state_points", 51)),
                    name=str(data.get("name", "instance")), solver=dict(data.get("solver", {})))


def load_instance(path) -> Instance:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError([("<file>", f"not valid JSON: {e}")]) from None
    return instance_from_dict(data)


def save_instance(inst: Instance, path) -> None:
    with open(path, "w") as fh:
        json.dump(inst.to_dict(), fh, indent=1)
        fh.write("\n")
