"""Compare the numba and pure-numpy element kernels, plus one full state solve.

Run from the repository root::

    python benchmarks/bench_kernels.py            # both kernel backends
    CHB_NUMBA=0 python benchmarks/bench_kernels.py --solve   # state solve on the numpy path

The kernel timings call both implementations directly, so the environment
flag only matters for ``--solve``.
"""
import argparse
import os
import time
import timeit

import numpy as np

from chb_control import _kernels
from chb_control.mesh import StructuredGrid
from chb_control.model import InterpolationH, ModelParams, Potential
from chb_control.state import Scheme, SolverOptions


def _best(fn, repeat=5, number=3):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(sizes):
    print(f"{'nodes':>8} {'kernel':>8} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n in sizes:
        g = StructuredGrid(n, n)
        t = g.tables
        rng = np.random.default_rng(0)
        f = rng.standard_normal(g.n_nodes)
        qv = rng.standard_normal((len(g.conn), 4))
        cases = {
            "gather": (lambda: _kernels.gather_numpy(g.conn, f, t["dx"]),
                       lambda: _kernels.gather_numba(g.conn, f, t["dx"])),
            "scatter": (lambda: _kernels.scatter_numpy(g.conn, qv, t["dy"], g.qweight, g.n_nodes),
                        lambda: _kernels.scatter_numba(g.conn, qv, t["dy"], g.qweight, g.n_nodes)),
            "pair": (lambda: _kernels.pair_numpy(g.conn, qv, t["val"], t["dx"], g.qweight),
                     lambda: _kernels.pair_numba(g.conn, qv, t["val"], t["dx"], g.qweight)),
        }
        for name, (np_fn, nb_fn) in cases.items():
            t_np = _best(np_fn)
            if _kernels.HAVE_NUMBA:
                nb_fn()    # compile outside the timed region
                t_nb = _best(nb_fn)
                print(f"{g.n_nodes:8d} {name:>8} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")
            else:
                print(f"{g.n_nodes:8d} {name:>8} {1e3 * t_np:10.3f} {'n/a':>10} {'n/a':>8}")


def bench_solve(n, velocity):
    grid = StructuredGrid(n, n, 4.0, 4.0)
    params = ModelParams(proliferation_P=1.0, apoptosis_A=0.2, chemotaxis_chi=0.5, final_time_T=0.1)
    sc = Scheme(grid, params, InterpolationH(), Potential.double_well(),
                SolverOptions(dt=0.01, velocity_enabled=velocity))
    x, y = grid.coords
    phi0 = np.tanh((1.0 - np.hypot(x - 2.0, y - 2.0)) / 0.5)
    start = time.perf_counter()
    sc.solve(sc.zero_control(), phi0)
    elapsed = time.perf_counter() - start
    mode = "full" if velocity else "reduced"
    print(f"state solve {n}x{n} nodes, {mode}, {sc.n_steps} steps, backend {_kernels.backend()}: {elapsed:.3f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[33, 65, 129, 257])
    ap.add_argument("--solve", action="store_true", help="also time a state solve")
    ap.add_argument("--solve-n", type=int, default=65)
    args = ap.parse_args()
    print(f"CHB_NUMBA={os.environ.get('CHB_NUMBA', '<unset>')}  numba available: {_kernels.HAVE_NUMBA}")
    bench_kernels(args.sizes)
    if args.solve:
        for velocity in (False, True):
            bench_solve(args.solve_n, velocity)


if __name__ == "__main__":
    main()
