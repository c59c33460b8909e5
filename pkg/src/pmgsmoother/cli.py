"""Command-line entry point: ``pmgsmoother solve|bench|memory``."""

from __future__ import annotations

import argparse
import sys

from . import bench
from .config import load_config


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--dim", type=int)
    common.add_argument("--degree", type=int)
    common.add_argument("--refinements", type=int)
    common.add_argument("--delta", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("full", "half"))
    common.add_argument("--smoother", choices=("jacobi", "cartesian", "cartesian_reinforced", "fdm"))
    common.add_argument("--local-iters", type=int, dest="local_iters")
    common.add_argument("--omega", type=float)
    common.add_argument("--distributor", choices=("dynamic", "lookup"))
    common.add_argument("--variant", choices=("even_odd", "dense"), help="1D kernel variant")
    common.add_argument("--workers", type=int)
    common.add_argument("--repetitions", type=int)
    common.add_argument("--no-flops", action="store_false", dest="count_flops", default=None,
                        help="disable the software FLOP counters")
    common.add_argument("--csv", help="append a result row to this CSV file")

    p = argparse.ArgumentParser(prog="pmgsmoother", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="GMRES solve with the multigrid preconditioner")
    b = sub.add_parser("bench", parents=[common], help="phase breakdown of the patch smoother")
    b.add_argument("--local-solvers", action="store_true",
                   help="compare local solver strategies on one Cartesian patch instead")
    sub.add_parser("memory", parents=[common], help="smoother storage in doubles per DoF")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    keys = ("dim", "degree", "refinements", "delta", "seed", "mode", "smoother", "local_iters",
            "omega", "distributor", "variant", "workers", "repetitions", "count_flops", "csv")
    cfg = load_config(args.config, **{k: getattr(args, k) for k in keys})
    out = sys.stdout
    if args.command == "solve":
        rec = bench.run_solve(cfg)
        print(f"dofs={rec.n_dofs} patches={rec.n_patches} iterations={rec.iterations} "
              f"l2_error={rec.l2_error:.3e} time={rec.phase_times['solve']:.2f}s", file=out)
    elif args.command == "bench" and args.local_solvers:
        rows = bench.compare_local_solvers(cfg.dim, cfg.degree, cfg.delta, cfg.seed,
                                           cfg.repetitions, cfg.variant)
        print(f"{'strategy':40s} {'rel.time':>9s} {'rel.flops':>9s} {'GFLOP/s':>8s}", file=out)
        for r in rows:
            print(f"{r['strategy']:40s} {r['relative_time']:9.2f} {r['relative_flops']:9.2f} "
                  f"{r['gflops']:8.2f}", file=out)
        return 0
    elif args.command == "bench":
        rec = bench.run_benchmark(cfg)
        rt, rf = rec.relative_times(), rec.relative_flops()
        print(f"dofs={rec.n_dofs} patches={rec.n_patches} baseline={rec.baseline_time * 1e3:.2f}ms "
              f"global_vmult={rec.global_vmult_time * 1e3:.2f}ms", file=out)
        for ph in bench.PHASES:
            f = f" {rf[ph]:8.3f}" if rf else ""
            print(f"{ph:24s} {rt[ph]:8.3f}{f}", file=out)
    else:
        mem = bench.report_memory(cfg, breakdown=True)
        print(f"dofs={mem['n_dofs']} doubles_per_dof={mem['doubles_per_dof']:.3f}", file=out)
        for k, v in mem["parts"].items():
            print(f"  {k:10s} {v}", file=out)
        return 0
    if cfg.csv:
        bench.emit_csv([rec], cfg.csv)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
