import os
import subprocess
import sys

import numpy as np
import pytest

from microgrid_decomp import kernels
from microgrid_decomp.instance import generate_instance
from microgrid_decomp.nodal_dp import NodeSolver


def battery_solver(backend, workers):
    inst = generate_instance(3, 0, T=6, atoms=4, n_controls=7, state_points=9)
    n = next(i for i, m in enumerate(inst.nodes) if m.has_battery)
    nm = inst.noise
    return inst, NodeSolver(inst.nodes[n], nm.d_hw[:, n], nm.d_el[:, n], nm.prob[:, n], inst.stage_price,
                            9, inst.resale, backend=backend, workers=workers)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernel not built")
@pytest.mark.parametrize("workers", [2, 8])
def test_worker_count_does_not_change_values(workers):
    inst, one = battery_solver("cython", 1)
    _, many = battery_solver("cython", workers)
    p = -inst.stage_price
    np.testing.assert_array_equal(one.backward("price", p).values, many.backward("price", p).values)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernel not built")
def test_compiled_matches_fallback_bitwise():
    inst, a = battery_solver("cython", 1)
    _, b = battery_solver("numpy", 1)
    p = -inst.stage_price
    np.testing.assert_array_equal(a.backward("price", p).values, b.backward("price", p).values)


def test_pure_python_switch():
    env = dict(os.environ, MICROGRID_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from microgrid_decomp import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_backend_lookup():
    assert kernels.get_backend("numpy").bellman_min is not None
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("MICROGRID_WORKERS", "4")
    assert kernels.worker_count() == 4
    monkeypatch.setenv("MICROGRID_WORKERS", "lots")
    assert kernels.worker_count() == 1
