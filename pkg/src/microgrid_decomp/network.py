"""Directed graph of the microgrid and the incidence algebra of its coupling.

Flows on arcs ``q`` and nodal exchanges ``f`` are coupled stage by stage by
Kirchhoff's law ``C q + f = 0`` where ``C`` is the node-arc incidence matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Arc counts of the five reference topologies (3, 6, 12, 24 and 48 buildings).
STANDARD_ARC_COUNTS = {3: 3, 6: 7, 12: 16, 24: 33, 48: 69}


class TopologyError(ValueError):
    """Raised for malformed node/arc lists."""


def build_incidence(nodes, arcs) -> np.ndarray:
    """Node-arc incidence matrix with ``-1`` at the tail and ``+1`` at the head.

    Parameters
    ----------
    nodes : sequence
        Node identifiers; row ``i`` of the result corresponds to ``nodes[i]``.
    arcs : sequence of (tail, head)
        Ordered pairs of node identifiers.
    """
    index = {n: i for i, n in enumerate(nodes)}
    if len(index) != len(nodes):
        raise TopologyError("duplicate node identifiers")
    C = np.zeros((len(nodes), len(arcs)), dtype=np.int64)
    for a, (tail, head) in enumerate(arcs):
        if tail not in index or head not in index:
            raise TopologyError(f"arc {a} ({tail!r}, {head!r}) references an unknown node")
        if tail == head:
            raise TopologyError(f"arc {a} is a self-loop on node {tail!r}")
        C[index[tail], a] = -1
        C[index[head], a] = 1
    return C


def _connected(n_nodes, arcs_idx) -> bool:
    parent = list(range(n_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in arcs_idx:
        parent[find(i)] = find(j)
    return len({find(i) for i in range(n_nodes)}) == 1


@dataclass(frozen=True)
class NetworkTopology:
    nodes: tuple
    arcs: tuple
    incidence: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_lists(cls, nodes, arcs) -> "NetworkTopology":
        nodes = tuple(nodes)
        arcs = tuple((t, h) for t, h in arcs)
        C = build_incidence(nodes, arcs)
        index = {n: i for i, n in enumerate(nodes)}
        if len(nodes) > 1 and not _connected(len(nodes), [(index[t], index[h]) for t, h in arcs]):
            raise TopologyError("graph is not connected")
        C.setflags(write=False)
        return cls(nodes, arcs, C)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def neighbours(self, i: int) -> list[int]:
        """Indices of nodes sharing an arc with node index ``i``."""
        cols = np.nonzero(self.incidence[i])[0]
        out = set()
        for a in cols:
            out.update(np.nonzero(self.incidence[:, a])[0].tolist())
        out.discard(i)
        return sorted(out)

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "arcs": [list(a) for a in self.arcs]}


def default_arc_count(n_nodes: int) -> int:
    if n_nodes in STANDARD_ARC_COUNTS:
        return STANDARD_ARC_COUNTS[n_nodes]
    return n_nodes - 1 + int(np.ceil(0.45 * (n_nodes - 2)))


def make_topology(n_nodes: int, seed: int = 0, n_arcs: int | None = None) -> NetworkTopology:
    """Random connected topology: a spanning tree plus chords.

    For the reference sizes the arc count matches the reference case
    studies; node identifiers are ``1..n_nodes``.
    """
    if n_nodes < 2:
        raise TopologyError("a microgrid needs at least two nodes")
    if n_arcs is None:
        n_arcs = default_arc_count(n_nodes)
    max_arcs = n_nodes * (n_nodes - 1) // 2
    if not n_nodes - 1 <= n_arcs <= max_arcs:
        raise TopologyError(f"cannot build {n_arcs} arcs on {n_nodes} nodes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_nodes)
    pairs = []
    used = set()
    for k in range(1, n_nodes):
        i = int(order[k])
        j = int(order[rng.integers(0, k)])
        pairs.append((i, j))
        used.add(frozenset((i, j)))
    candidates = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)
                  if frozenset((i, j)) not in used]
    chords = rng.permutation(len(candidates))[: n_arcs - len(pairs)]
    pairs.extend(candidates[c] for c in sorted(chords))
    arcs = []
    for i, j in pairs:
        if rng.random() < 0.5:
            i, j = j, i
        arcs.append((i + 1, j + 1))
    return NetworkTopology.from_lists(range(1, n_nodes + 1), arcs)


def project_onto_image(v, topology: NetworkTopology) -> np.ndarray:
    """Orthogonal projection of a stage-by-node vector onto ``im(C)``.

    ``v`` has shape ``(T, |N|)`` (a flat ``T*|N|`` vector is reshaped).  For a
    connected graph ``im(C)`` is the set of zero-sum node vectors, so the
    projection removes the per-stage mean.
    """
    v = np.asarray(v, dtype=float)
    flat = v.ndim == 1
    w = v.reshape(-1, topology.n_nodes)
    out = w - w.mean(axis=1, keepdims=True)
    return out.reshape(v.shape) if flat else out
