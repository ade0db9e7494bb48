import numpy as np
import pytest
from hypothesis import given, strategies as st

from microgrid_decomp.instance import generate_instance, tiny_lattice_instance
from microgrid_decomp.oracle import exact_solve
from microgrid_decomp.sddp import (CutCollection, SDDPOptions, expected_stage_cut, sddp_run,
                                   select_cuts_level1, stage_floor)
from microgrid_decomp.uncertainty import quantize_all

from reference_models import deterministic_value


# ------------------------------------------------------------ cut selection

def test_single_cut_kept():
    np.testing.assert_array_equal(select_cuts_level1([1.0], [[0.5]], [[0.0], [3.0]]), [0])


def test_dominated_cut_dropped():
    keep = select_cuts_level1([0.0, -1.0], [[1.0], [1.0]], [[0.0], [1.0], [2.0]])
    np.testing.assert_array_equal(keep, [0])


def test_duplicate_keeps_newest():
    keep = select_cuts_level1([0.0, 0.0], [[1.0], [1.0]], [[0.0], [1.0]])
    np.testing.assert_array_equal(keep, [1])


def test_cap_keeps_most_recent():
    slopes = np.linspace(-1, 1, 5)[:, None]
    pts = np.linspace(-10, 10, 21)[:, None]
    keep = select_cuts_level1(np.zeros(5), slopes, pts, max_cuts=2)
    assert len(keep) == 2 and keep.max() == 4


@given(st.integers(0, 10_000))
def test_selection_preserves_max_at_trial_points(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=12), rng.normal(size=(12, 2))
    pts = rng.normal(size=(7, 2))
    keep = select_cuts_level1(a, b, pts)
    full = (pts @ b.T + a).max(axis=1)
    kept = (pts @ b[keep].T + a[keep]).max(axis=1)
    np.testing.assert_allclose(kept, full, atol=1e-9)
    assert len(keep) <= len(pts)


def test_options_reject_unknown_keys():
    with pytest.raises(ValueError):
        SDDPOptions.from_dict({"iterations": 3})


# ------------------------------------------------------------ cuts

def test_floor_bounds_stage_values():
    inst = tiny_lattice_instance(2, n_nodes=2, T=3, atoms=2, resale=True)
    floor = stage_floor(inst)
    assert np.all(np.isfinite(floor))
    res = sddp_run(inst, {"resample_size": 4, "max_iters": 5, "check_every": 5, "ub_scenarios": 5})
    assert res.lower_bound >= floor[0]
    assert floor[0] <= exact_solve(inst).value


def test_averaged_cut_valid_tight_and_slope():
    inst = generate_instance(3, 5, T=3, atoms=3)
    stages = quantize_all(inst.noise, 5, 0)
    cuts = CutCollection(inst, stage_floor(inst))
    t = inst.horizon - 1
    value = cuts.value_function(t + 1)
    x = inst.x0_vector()
    a, g, v = expected_stage_cut(inst, t, value, stages[t], x)
    assert a + g @ x == pytest.approx(v, abs=1e-8)
    rng = np.random.default_rng(1)
    for _ in range(8):
        y = np.clip(x + rng.normal(0, 0.15, len(x)), 0.05, None)
        assert a + g @ y <= expected_stage_cut(inst, t, value, stages[t], y)[2] + 1e-6
    # the slope is a subgradient: between one-sided differences, equal to them where smooth
    eps = 1e-5
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = eps
        up = (expected_stage_cut(inst, t, value, stages[t], x + e)[2] - v) / eps
        dn = (v - expected_stage_cut(inst, t, value, stages[t], x - e)[2]) / eps
        assert dn - 1e-4 <= g[i] <= up + 1e-4
        if abs(up - dn) < 1e-6:
            assert g[i] == pytest.approx((up + dn) / 2, abs=1e-4)


# ------------------------------------------------------------ full runs

@pytest.mark.parametrize("seed", range(3))
def test_lower_bound_below_oracle_and_monotone(seed):
    inst = tiny_lattice_instance(seed, n_nodes=2, T=3, atoms=2, resale=bool(seed % 2))
    res = sddp_run(inst, {"resample_size": 3, "max_iters": 15, "check_every": 5, "ub_scenarios": 200})
    lbs = [r.lower_bound for r in res.trace]
    assert np.all(np.diff(lbs) >= 0)
    assert res.lower_bound <= exact_solve(inst).value + 1e-6


def test_deterministic_gap_closes_at_optimum():
    inst = generate_instance(3, 7, T=3, atoms=1, delta_t=1.0)
    res = sddp_run(inst, {"resample_size": 1, "check_every": 2, "ub_scenarios": 2, "max_iters": 40})
    assert res.termination == "gap below tolerance"
    assert res.stat_upper[0] - res.lower_bound <= 1e-6
    assert res.lower_bound == pytest.approx(deterministic_value(inst), abs=1e-5)


def test_upper_bound_consistent_with_lower_bound():
    inst = generate_instance(3, 2, T=6, atoms=3, delta_t=1.0)
    res = sddp_run(inst, {"resample_size": 9, "max_iters": 20, "check_every": 10, "ub_scenarios": 400})
    ub, ci = res.stat_upper
    assert ub >= res.lower_bound - 2 * ci
    assert [r.iteration for r in res.trace] == list(range(1, res.iterations + 1))


def test_seeded_runs_repeat():
    inst = tiny_lattice_instance(6, n_nodes=2, T=2, atoms=2)
    opts = {"resample_size": 3, "max_iters": 6, "check_every": 3, "ub_scenarios": 50, "seed": 4}
    a, b = sddp_run(inst, opts), sddp_run(inst, opts)
    assert [r.lower_bound for r in a.trace] == [r.lower_bound for r in b.trace]
    assert a.stat_upper == b.stat_upper
