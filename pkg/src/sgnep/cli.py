"""Command line entry point (``sgnep`` or ``python -m sgnep``)."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, SgnepError
from . import experiment as ex


def _progress(every):
    def cb(rec, _snap):
        if rec["k"] % every == 0:
            print(
                f"k={rec['k']:>7d}  dist={rec['dist_rel_ref']:.3e}  cons_y={rec['consensus_y']:.3e}"
                f"  viol={rec['violation']:.2e}  T={rec['inner_steps']}",
                file=sys.stderr, flush=True,
            )

    return cb if every > 0 else None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="sgnep",
        description="Distributed stochastic generalized Nash equilibrium seeking experiments.",
        epilog=f"Artifacts go under ${ex.OUTPUT_ROOT_ENV} (default ./results).",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment and write metrics.csv, meta.json and plots")
    p_run.add_argument("config")
    p_run.add_argument("--progress", type=int, default=0, metavar="N", help="print a status line every N iterations")
    p_cmp = sub.add_parser("compare", help="rerun an experiment under several inner-step schedules")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--schedules", required=True, help="comma list of const:T or power:scale:b:floor")
    p_cmp.add_argument("--jobs", type=int, default=1)
    p_ref = sub.add_parser("reference", help="compute (or load from cache) the centralized equilibrium")
    p_ref.add_argument("config")
    p_probe = sub.add_parser("probe", help="monotonicity and stochastic-oracle reports")
    p_probe.add_argument("config")
    p_probe.add_argument("--trials", type=int, default=None)
    p_probe.add_argument("--draws", type=int, default=2000)
    args = ap.parse_args(argv)

    try:
        cfg = ex.load_config(args.config)
        if args.command == "run":
            out, res = ex.run_experiment(cfg, callback=_progress(args.progress))
            last = res.records[-1]
            print(f"{len(res.records)} iterations in {res.wall_time:.1f}s; final distance {last['dist_rel_ref']:.3e}")
            print(f"artifacts: {out}")
        elif args.command == "compare":
            specs = [s for s in args.schedules.split(",") if s.strip()]
            out, curves = ex.compare_schedules(cfg, specs, jobs=args.jobs)
            w = cfg.run["ma_window"]
            for label, c in curves.items():
                print(f"{label:>24s}  final MA({w}) distance {ex.moving_average(c, w)[-1]:.3e}")
            print(f"artifacts: {out}")
        elif args.command == "reference":
            out, ref = ex.reference_command(cfg)
            print(f"method {ref.method}; residual {ref.residual:.3e}; |x*| = {np.linalg.norm(ref.x):.6g}")
            print(f"artifacts: {out}")
        else:
            rep = ex.probe(cfg, trials=args.trials, oracle_draws=args.draws)
            print(json.dumps(rep, indent=2, default=float))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SgnepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
