import numpy as np
import pytest

from microgrid_decomp.coordination import dadp_run
from microgrid_decomp.instance import tiny_lattice_instance
from microgrid_decomp.policy import build_surrogate
from microgrid_decomp.sddp import sddp_run
from microgrid_decomp.storage import StorageError, load_solver_output, read_container, save_cuts, save_grids


@pytest.fixture(scope="module")
def inst():
    return tiny_lattice_instance(2, n_nodes=2, T=2, atoms=2)


def surrogate_values(sur, x):
    return [float(v(x)[0]) for v in sur.values]


def test_grid_round_trip(tmp_path, inst):
    res = dadp_run(inst, {"max_iters": 3})
    save_grids(tmp_path / "v.mgv", res)
    method, back = load_solver_output(tmp_path / "v.mgv", inst)
    assert method == "dadp" and back.bound == res.bound
    x = inst.x0_vector()[None]
    assert surrogate_values(build_surrogate("dadp", inst, back), x) == \
        surrogate_values(build_surrogate("dadp", inst, res), x)


def test_cut_round_trip(tmp_path, inst):
    res = sddp_run(inst, {"resample_size": 3, "max_iters": 4, "check_every": 4, "ub_scenarios": 10})
    save_cuts(tmp_path / "c.mgv", res)
    header, arrays = read_container(tmp_path / "c.mgv")
    assert header["kind"] == "cuts" and header["stages"] == inst.horizon
    _, back = load_solver_output(tmp_path / "c.mgv", inst)
    x = inst.x0_vector()[None]
    for t in range(inst.horizon + 1):
        np.testing.assert_array_equal(back.value_function(t)(x), res.value_function(t)(x))


def test_rejects_foreign_files(tmp_path, inst):
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(StorageError):
        read_container(tmp_path / "junk")
    res = dadp_run(inst, {"max_iters": 1})
    save_grids(tmp_path / "v.mgv", res)
    with pytest.raises(StorageError):
        load_solver_output(tmp_path / "v.mgv", tiny_lattice_instance(2, n_nodes=3, T=2, atoms=2))
