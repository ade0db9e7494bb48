"""Command line front-end: ``microgrid {generate,solve,simulate,bench}``.

Output directory layout::

    instance.json            copy of the solved instance
    value_{method}.mgv       value functions (grids or cuts)
    bounds.csv               bounds and iteration counts, one column per instance
    trace_{method}.csv       per-iteration bound table
    convergence_{method}.csv iterates of the price / resource process (long format)
    sim_{method}.csv         simulation summary; sim_{method}_nodes.csv per-node costs
    simulation.csv           all simulated policies side by side (bench)
    timings.csv              wall-clock seconds; the only non-deterministic file

All numeric tables are written with ten significant digits, so two runs
with the same seeds produce identical files.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .coordination import CoordinationOptions, dadp_run, padp_run
from .coordination import write_trace as write_coord_trace
from .instance import ConfigError, generate_instance, load_instance, save_instance
from .policy import build_surrogate, simulate_policy
from .sddp import SDDPOptions, sddp_run
from .sddp import write_trace as write_sddp_trace
from .storage import StorageError, load_solver_output, save_cuts, save_grids
from .uncertainty import sample_scenarios

log = logging.getLogger("microgrid")

METHODS = ("sddp", "dadp", "padp")
BOUND_ROW = {"sddp": "SDDP LB", "dadp": "DADP LB", "padp": "PADP UB"}
EXIT_CONFIG = 2
EXIT_SOLVER = 1


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])


def _read_table(path):
    """Column-per-instance table as ``(instances, {row: {instance: value}})``."""
    if not path.exists():
        return [], {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    return cols, {r[0]: dict(zip(cols, r[1:])) for r in rows[1:]}


def _update_table(path, name, values: dict, order):
    cols, table = _read_table(path)
    if name not in cols:
        cols.append(name)
    for k, v in values.items():
        table.setdefault(k, {})[name] = _fmt(v)
    keys = [k for k in order if k in table] + sorted(k for k in table if k not in order)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row"] + cols)
        for k in keys:
            w.writerow([k] + [table[k].get(c, "") for c in cols])


def _record_time(out: Path, label: str, seconds: float):
    path = out / "timings.csv"
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("step,seconds\n")
        fh.write(f"{label},{seconds:.3f}\n")


BOUND_ORDER = [f"{BOUND_ROW[m]}" for m in METHODS] + [f"{m.upper()} iterations" for m in METHODS]


def _solve(inst, method, out: Path, seed: int | None, max_iters: int | None):
    opts = dict(inst.solver.get(method, {}))
    if seed is not None:
        opts["seed"] = seed
    if max_iters is not None:
        opts["max_iters"] = max_iters
    t0 = time.perf_counter()
    if method == "sddp":
        res = sddp_run(inst, SDDPOptions.from_dict(opts))
        save_cuts(out / "value_sddp.mgv", res)
        write_sddp_trace(res, out / "trace_sddp.csv")
        _write_rows(out / "convergence_sddp.csv", ["iteration", "lower_bound", "ub_mean", "ub_ci95"],
                    [(r.iteration, r.lower_bound, r.ub_mean, r.ub_ci95) for r in res.trace])
        bound, iters = res.lower_bound, res.iterations
    else:
        run = dadp_run if method == "dadp" else padp_run
        res = run(inst, CoordinationOptions.from_dict(opts))
        save_grids(out / f"value_{method}.mgv", res)
        write_coord_trace(res, out / f"trace_{method}.csv")
        rows = []
        for k, z in enumerate(res.history):
            for t in range(z.shape[0]):
                for n in range(z.shape[1]):
                    rows.append((k, t, n, z[t, n]))
        _write_rows(out / f"convergence_{method}.csv", ["iteration", "stage", "node",
                                                        "price" if method == "dadp" else "resource"], rows)
        bound, iters = res.bound, len(res.trace) - 1
    _record_time(out, f"solve_{method}", time.perf_counter() - t0)
    _update_table(out / "bounds.csv", inst.name,
                  {BOUND_ROW[method]: bound, f"{method.upper()} iterations": iters}, BOUND_ORDER)
    log.info("%s: bound %.6f after %d iterations (%s)", method, bound, iters,
             getattr(res, "termination", ""))
    return res


def _simulate(inst, method, out: Path, scenarios: int, seed: int, output=None, ref=None):
    if output is None:
        m, output = load_solver_output(out / f"value_{method}.mgv", inst)
        if m != method:
            raise StorageError(f"value_{method}.mgv holds {m} output")
    t0 = time.perf_counter()
    sur = build_surrogate(method, inst, output)
    sc = sample_scenarios(inst.noise, scenarios, seed)
    rep = simulate_policy(inst, sur, sc)
    _record_time(out, f"simulate_{method}", time.perf_counter() - t0)
    if ref is None and method != "sddp" and (out / "sim_sddp.csv").exists():
        with open(out / "sim_sddp.csv", newline="") as fh:
            ref = float(list(csv.DictReader(fh))[0]["mean"])
    rel = (ref - rep.mean) / abs(ref) * 100 if ref and method != "sddp" else None
    _write_rows(out / f"sim_{method}.csv",
                ["method", "mean", "ci95", "rel_to_sddp_pct", "scenarios", "failed", "max_kirchhoff_residual"],
                [(method, rep.mean, rep.ci95, rel, len(rep.costs), rep.failed, rep.kirchhoff_residual)])
    _write_rows(out / f"sim_{method}_nodes.csv", ["node", "mean_cost"],
                [(n, v) for n, v in enumerate(rep.node_costs.mean(axis=0))])
    log.info("%s policy: %.6f +- %.6f over %d scenarios", method, rep.mean, rep.ci95, len(rep.costs))
    return rep


def cmd_generate(a):
    kw = dict(T=a.horizon, atoms=a.atoms, delta_t=a.delta_t if a.delta_t else 24.0 / a.horizon,
              state_points=a.state_points, n_controls=a.controls, resale=not a.no_resale)
    inst = generate_instance(a.nodes, a.seed, **kw)
    save_instance(inst, a.out)
    log.info("wrote %s: %d nodes, %d arcs, T=%d", a.out, inst.n_nodes, inst.n_arcs, inst.horizon)
    return 0


def _prepare(a):
    inst = load_instance(a.instance)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / "instance.json"
    if not dst.exists() or not dst.samefile(a.instance):
        shutil.copyfile(a.instance, dst)
    return inst, out


def cmd_solve(a):
    inst, out = _prepare(a)
    _solve(inst, a.method, out, a.seed, a.max_iters)
    return 0


def cmd_simulate(a):
    out = Path(a.policy_dir)
    inst = load_instance(a.instance or out / "instance.json")
    _simulate(inst, a.method, out, a.scenarios, a.seed)
    return 0


def cmd_bench(a):
    inst, out = _prepare(a)
    for f in ["bounds.csv", "simulation.csv", "timings.csv"]:
        (out / f).unlink(missing_ok=True)
    results = {m: _solve(inst, m, out, a.seed, a.max_iters) for m in METHODS}
    reps = {"sddp": _simulate(inst, "sddp", out, a.scenarios, a.sim_seed, results["sddp"])}
    for m in METHODS[1:]:
        reps[m] = _simulate(inst, m, out, a.scenarios, a.sim_seed, results[m], ref=reps["sddp"].mean)
    ref = reps["sddp"].mean
    table = {}
    for m in METHODS:
        table[f"{m.upper()} value"] = reps[m].mean
        table[f"{m.upper()} ci95"] = reps[m].ci95
        if m != "sddp":
            table[f"{m.upper()}/SDDP %"] = (ref - reps[m].mean) / abs(ref) * 100
    order = ["SDDP value", "SDDP ci95", "DADP value", "DADP ci95", "DADP/SDDP %",
             "PADP value", "PADP ci95", "PADP/SDDP %"]
    _update_table(out / "simulation.csv", inst.name, table, order)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="microgrid", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, help="threads for the DP kernel (default: $MICROGRID_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic instance")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=96)
    g.add_argument("--delta-t", type=float, default=None, help="hours per stage (default 24 / horizon)")
    g.add_argument("--atoms", type=int, default=10)
    g.add_argument("--state-points", type=int, default=51)
    g.add_argument("--controls", type=int, default=21)
    g.add_argument("--no-resale", action="store_true")
    g.add_argument("--out", default="instance.json")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run one method and store its value functions")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--instance", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--max-iters", type=int, default=None)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="evaluate a stored policy by Monte Carlo")
    m.add_argument("--method", choices=METHODS, required=True)
    m.add_argument("--policy-dir", required=True)
    m.add_argument("--instance", default=None, help="default: <policy-dir>/instance.json")
    m.add_argument("--scenarios", type=int, default=5000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="solve and simulate with all three methods")
    b.add_argument("--instance", required=True)
    b.add_argument("--out", default="bench")
    b.add_argument("--scenarios", type=int, default=5000)
    b.add_argument("--seed", type=int, default=None, help="solver seed override")
    b.add_argument("--sim-seed", type=int, default=0)
    b.add_argument("--max-iters", type=int, default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if a.workers is not None:
        if a.workers < 1:
            parser.error("--workers must be >= 1")
        os.environ["MICROGRID_WORKERS"] = str(a.workers)
    try:
        return a.func(a)
    except ConfigError as e:
        print(f"microgrid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StorageError, FileNotFoundError) as e:
        print(f"microgrid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # solver failures carry their own context
        print(f"microgrid: {a.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
