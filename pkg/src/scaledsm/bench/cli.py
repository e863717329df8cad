"""Command-line entry point: ``scaledsm-bench {run,grid,rip,replay}``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..initialization import RankDeficientSurrogate
from .config import ConfigError, load_config
from .runner import cmd_grid, cmd_rip, cmd_run, numpy_errors, replay

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaledsm-bench",
        description="Run low-rank recovery experiments and write convergence traces.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every configured solver at every sweep point",
        "grid": "sweep the geometric schedule over the lambda/q grid",
        "rip": "estimate mixed-norm RIP and outlier-bound constants",
        "replay": "re-run a configuration and compare traces with an earlier output directory",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="override problem.seed")
        p.add_argument("--out", help="output directory (for replay: the run to compare against)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for sweep points or grid cells")
    return parser


def _apply_overrides(cfg, args):
    update = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError([f"--seed {args.seed}: must be an unsigned 64-bit integer"])
        update["problem"] = cfg.problem.model_copy(update={"seed": args.seed})
    if args.out is not None and args.command != "replay":
        update["output"] = cfg.output.model_copy(update={"dir": args.out})
    if args.threads < 1:
        raise ConfigError([f"--threads {args.threads}: must be >= 1"])
    return cfg.model_copy(update=update) if update else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "replay":
            ref = args.out or cfg.output.dir
            res = replay(cfg, ref, args.threads)
            for line in res.mismatches:
                print(f"MISMATCH {line}")
            print(f"compared {res.compared} traces: {'identical' if res.ok else 'different'}")
            return EXIT_OK if res.ok else EXIT_MISMATCH
        report = {"run": cmd_run, "grid": cmd_grid, "rip": cmd_rip}[args.command](cfg, args.threads)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except (RankDeficientSurrogate, *numpy_errors()) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL

    for rec in report.traces:
        itt = "-" if rec.iters_to_tol is None else rec.iters_to_tol
        print(f"{rec.point:<24} {rec.solver:<28} {rec.status:<10} iters={rec.iterations:<5} "
              f"rel_err={rec.final_rel_err:.3e} to_1e-10={itt}")
    for row in report.rip:
        print(f"rank={row['rank']} delta1={row['delta1_hat']:.4g} delta2={row['delta2_hat']:.4g} "
              f"chi={row['chi_hat']:.4g} predicted_iters={row['predicted_iters']:.4g}")
    print(f"output written to {report.out_dir}")
    if report.failed:
        print(f"{len(report.failed)} run(s) diverged", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
