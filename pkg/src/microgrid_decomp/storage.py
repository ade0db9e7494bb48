"""Versioned binary container for value functions.

Layout: one ASCII magic line, one line of JSON header, then an ``.npz``
archive with the arrays.  The header names the kind of content
(``"grids"`` for nodal DP tables, ``"cuts"`` for SDDP cut collections) and
the array keys, so files can be inspected with ``head -2``.
"""
from __future__ import annotations

import io
import json
from types import SimpleNamespace

import numpy as np

MAGIC = b"MICROGRID-VF\n"
VERSION = 1


class StorageError(ValueError):
    pass


def _write(path, header: dict, arrays: dict) -> None:
    header = dict(header, version=VERSION, arrays=sorted(arrays))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())


def read_container(path):
    """Return ``(header, arrays)`` from a container file."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise StorageError(f"{path}: not a value-function container")
        header = json.loads(fh.readline())
        if header.get("version") != VERSION:
            raise StorageError(f"{path}: unsupported version {header.get('version')}")
        with np.load(io.BytesIO(fh.read())) as z:
            arrays = {k: z[k] for k in z.files}
    return header, arrays


def save_grids(path, result) -> None:
    """Store the nodal grids and arc stage values of a coordination result."""
    arrays = {"process": result.process, "arc_stage_values": result.arc_stage_values}
    for n, g in enumerate(result.grids):
        arrays[f"values_{n}"] = g.values
        arrays[f"b_axis_{n}"] = g.b_axis
        arrays[f"h_axis_{n}"] = g.h_axis
    _write(path, {"kind": "grids", "method": result.method, "mode": result.grids[0].mode,
                  "nodes": len(result.grids), "bound": result.bound}, arrays)


def save_cuts(path, result) -> None:
    """Store the cut collection of an SDDP result (all cuts and the active sets)."""
    cuts = result.cuts
    arrays = {}
    for t in range(cuts.T):
        arrays[f"alpha_{t}"] = cuts.alpha[t]
        arrays[f"beta_{t}"] = cuts.beta[t]
        arrays[f"active_{t}"] = cuts.active[t]
    _write(path, {"kind": "cuts", "method": "sddp", "stages": cuts.T,
                  "lower_bound": result.lower_bound}, arrays)


def load_solver_output(path, inst):
    """Rebuild an object accepted by :func:`policy.build_surrogate`.

    Returns ``(method, output)``.
    """
    from .nodal_dp import ValueGrid
    from .sddp import CutCollection, stage_floor

    header, a = read_container(path)
    if header["kind"] == "grids":
        if header["nodes"] != inst.n_nodes:
            raise StorageError(f"{path}: {header['nodes']} nodes, instance has {inst.n_nodes}")
        grids = []
        for n, m in enumerate(inst.nodes):
            grids.append(ValueGrid(m, a[f"b_axis_{n}"], a[f"h_axis_{n}"], a[f"values_{n}"],
                                   header["mode"], a["process"][:, n]))
        out = SimpleNamespace(grids=grids, arc_stage_values=a["arc_stage_values"],
                              process=a["process"], bound=header["bound"], method=header["method"])
        return header["method"], out
    if header["kind"] == "cuts":
        if header["stages"] != inst.horizon:
            raise StorageError(f"{path}: {header['stages']} stages, instance has {inst.horizon}")
        cuts = CutCollection(inst, stage_floor(inst))
        for t in range(inst.horizon):
            cuts.alpha[t] = a[f"alpha_{t}"]
            cuts.beta[t] = a[f"beta_{t}"]
            cuts.active[t] = a[f"active_{t}"]
        out = SimpleNamespace(cuts=cuts, lower_bound=header["lower_bound"],
                              value_function=cuts.value_function)
        return "sddp", out
    raise StorageError(f"{path}: unknown content kind {header['kind']!r}")
