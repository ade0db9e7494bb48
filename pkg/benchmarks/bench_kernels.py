"""Compare the compiled Bellman kernel with the NumPy fallback.

Runs a full backward DP for one battery node with both backends, checks
that the value tables agree bit for bit and reports wall times.

    python benchmarks/bench_kernels.py [--points 51] [--controls 21] [--horizon 96] [--workers 1]
"""
import argparse
import time

import numpy as np

from microgrid_decomp import kernels
from microgrid_decomp.instance import generate_instance
from microgrid_decomp.nodal_dp import NodeSolver


def run(backend, inst, n, points, workers, repeat):
    m = inst.nodes[n]
    noise = inst.noise
    s = NodeSolver(m, noise.d_hw[:, n], noise.d_el[:, n], noise.prob[:, n], inst.stage_price,
                   points, inst.resale, backend=backend, workers=workers)
    p = -inst.stage_price
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        g = s.backward("price", p)
        best = min(best, time.perf_counter() - t0)
    return g.values, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--points", type=int, default=51)
    ap.add_argument("--controls", type=int, default=21)
    ap.add_argument("--horizon", type=int, default=96)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    inst = generate_instance(3, 0, T=a.horizon, n_controls=a.controls, state_points=a.points)
    n = next(i for i, m in enumerate(inst.nodes) if m.has_battery)
    print(f"battery node, {a.points}x{a.points} states, {a.controls}x{a.controls} controls, "
          f"{inst.noise.n_atoms} atoms, T={a.horizon}")
    v_np, t_np = run("numpy", inst, n, a.points, a.workers, a.repeat)
    print(f"numpy   {t_np:8.3f} s")
    if kernels.BACKEND != "cython":
        print("cython  not built")
        return
    v_cy, t_cy = run("cython", inst, n, a.points, a.workers, a.repeat)
    print(f"cython  {t_cy:8.3f} s   speedup {t_np / t_cy:5.1f}x")
    print("identical" if np.array_equal(v_np, v_cy) else f"max diff {np.abs(v_np - v_cy).max():.3e}")


if __name__ == "__main__":
    main()
