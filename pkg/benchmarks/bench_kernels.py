"""Compiled vs numpy kernels on one structured mesh.

    python3 benchmarks/bench_kernels.py --nx 250 --ny 200 --repeat 5

Prints median wall time per kernel for each available backend, and checks
that both backends give the same numbers.
"""
import argparse
import statistics
import time

import numpy as np

from damwave import kernels
from damwave.cpgraph import structured_mesh
from damwave.femcore import Assembler, PhysicsConstants, build_dof_map, solve_spd


def _median_time(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def run(nx, ny, repeat, threads):
    mesh = structured_mesh(0.0, 2.5, 0.0, 2.0, nx, ny, elevation=lambda lon, lat: -20.0 - 5.0 * lon)
    dm = build_dof_map(mesh)
    asm = Assembler(dm, PhysicsConstants())
    M = asm.mass(False)
    rng = np.random.default_rng(0)
    u = rng.uniform(-1.0, 1.0, dm.n_dofs)
    x = rng.standard_normal(dm.n_dofs)
    y = np.empty_like(x)
    print(f"{len(dm.tri)} triangles, {dm.n_dofs} dofs, nnz {len(M.data)}, threads {threads}")

    results = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        kernels.set_num_threads(threads)
        B = asm.stiffness(u)
        rows = {
            "stiffness assembly": _median_time(lambda: asm.stiffness(u), repeat),
            "csr mat-vec": _median_time(lambda: B.matvec(x, y), repeat),
            "dot": _median_time(lambda: kernels.dot(x, x, threads), repeat),
            "mass solve": _median_time(lambda: solve_spd(M, x, tol=1e-10), repeat),
        }
        results[name] = (rows, B.data.copy(), solve_spd(M, x, tol=1e-10))

    names = list(results)
    print(f"{'kernel':<20}" + "".join(f"{n:>12}" for n in names) + ("    ratio" if len(names) == 2 else ""))
    for k in results[names[0]][0]:
        ts = [results[n][0][k] for n in names]
        line = f"{k:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts)
        if len(ts) == 2:
            line += f"  {ts[1] / ts[0]:7.1f}x"
        print(line)
    if len(names) == 2:
        a, b = results[names[0]], results[names[1]]
        print("max |B_c - B_py|:", float(np.max(np.abs(a[1] - b[1]))))
        print("max |x_c - x_py|:", float(np.max(np.abs(a[2] - b[2]))))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nx", type=int, default=250)
    ap.add_argument("--ny", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args()
    run(a.nx, a.ny, a.repeat, a.threads)
