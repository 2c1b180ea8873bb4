"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys

from . import kernels


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _thread_list(text: str) -> list[int]:
    try:
        vals = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("thread counts must be positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="damwave", description="Adaptive dam-break wave simulator.")
    parser.add_argument("--backend", choices=("cython", "python"), help="kernel backend (default: best available)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mesh", help="mesh a raster by adaptive refinement")
    p.add_argument("--raster", required=True)
    p.add_argument("--tolerance", required=True, type=float, help="max interpolation error, metres")
    p.add_argument("--out", required=True)
    p.add_argument("--max-triangles", type=int, default=200_000)
    p.add_argument("--max-iterations", type=int, default=30)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("bench", help="thread-scaling benchmark")
    p.add_argument("--scenario", required=True)
    p.add_argument("--threads", type=_thread_list, default=[1])
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="check mesh conformity")
    p.add_argument("--mesh", required=True)
    return parser


def _mesh(args) -> int:
    from .cpgraph import write_mesh
    from .terrain import RefinementConfig, generate_mesh, load_raster

    raster = load_raster(args.raster)
    mesh = generate_mesh(raster, RefinementConfig(args.tolerance, args.max_iterations, args.max_triangles))
    write_mesh(mesh, args.out)
    print(f"{len(mesh.triangles)} triangles written to {args.out}")
    if raster.nodata_hits:
        print(f"warning: {raster.nodata_hits} samples hit nodata cells (treated as 0 m)", file=sys.stderr)
    return 0


def _simulate(args) -> int:
    from .simulation import load_scenario, run_scenario

    kernels.set_num_threads(args.threads)
    result = run_scenario(load_scenario(args.scenario), out_dir=args.out_dir)
    print(f"{result.state.step} steps, t = {result.state.t:g} s, outputs in {args.out_dir}")
    return 0


def _bench(args) -> int:
    from .bench import run_bench
    from .simulation import load_scenario

    if args.iterations < 1 or args.repetitions < 1:
        raise UsageError("--iterations and --repetitions must be positive")
    threads = sorted(set(args.threads))
    report = run_bench(load_scenario(args.scenario), threads, args.iterations, args.repetitions)
    report.write_csv(args.out)
    for row in report.rows():
        print(f"threads={row[0]} total={row[-3]:.3f}s speedup={row[-2]:.2f} efficiency={row[-1]:.2f}")
    return 0


def _validate(args) -> int:
    from .cpgraph import read_mesh, validate_conformity

    report = validate_conformity(read_mesh(args.mesh))
    print(report)
    return 0 if report.ok else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.backend:
            kernels.use_backend(args.backend)
        handler = {"mesh": _mesh, "simulate": _simulate, "bench": _bench, "validate": _validate}[args.command]
        return handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    except Exception as exc:
        print(f"damwave: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
