"""Command line entry point: ``cardsim {run,sweep,tails,bounds,validate} CONFIG``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import experiments as ex


def _add_common(p):
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--trials", type=int, help="trials per cell (overrides config)")
    p.add_argument("--arrivals", type=int, help="arrivals per trial (overrides config)")
    p.add_argument("--out-dir", help="directory for CSV and figure outputs")
    p.add_argument("--threads", type=int, help="trials simulated concurrently")
    p.add_argument("--plots", action="store_true", help="also render PNG figures next to the CSVs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="cardsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "simulate every cell and print a summary"),
                        ("sweep", "write the mean response time curves CSV"),
                        ("tails", "write the response time tail CSV"),
                        ("validate", "check structural laws against simulation"),
                        ("bounds", "print analytic constants and bounds")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name == "bounds":
            p.add_argument("--format", choices=("csv", "text"), default="text")
            p.add_argument("--output", help="write the table to this file instead of stdout")
    return parser


def _nanmean(values):
    vals = np.asarray(values, dtype=float)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def _summary_rows(cfg, cells_iter):
    rows = []
    for _, model, rho, cells in cells_iter:
        w_mg1 = ex.analytics.mg1_mean_work(rho / model.mean, model)
        for c in cells:
            row = {"policy": c.policy, "dist": c.dist, "rho": rho, "reason": c.reason}
            if c.trials:
                mean, half, _ = ex.estimate([t.mean_T for t in c.trials])
                row.update(
                    mean_T=mean, ci_half=half, normalized=mean / w_mg1,
                    W_all=float(np.mean([t.time_avg_work_total for t in c.trials])),
                    IW_all=float(np.mean([t.idle_work_cross_term for t in c.trials])),
                    idle_min=float(np.mean([t.idle_fraction_per_server.min() for t in c.trials])),
                    mean_B=_nanmean([t.cycle_stats.mean_B for t in c.trials]),
                    mean_A=_nanmean([t.cycle_stats.mean_A for t in c.trials]),
                    p99=float(np.mean([t.tail.get(0.99, np.nan) for t in c.trials])),
                )
            rows.append(row)
    return rows


SUMMARY_COLUMNS = ("policy", "dist", "rho", "mean_T", "ci_half", "normalized", "W_all", "IW_all",
                   "idle_min", "mean_B", "mean_A", "p99", "reason")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = dict(seed=args.seed, trials=args.trials, arrivals=args.arrivals,
                     out_dir=args.out_dir, threads=args.threads)
    if args.plots:
        overrides["figures"] = True
    try:
        cfg = ex.load_config(args.config, **overrides)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cardsim: config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "bounds":
        rows = ex.emit_bounds_table(cfg)
        text = (ex.rows_to_csv if args.format == "csv" else ex.rows_to_text)(ex.analytics.BOUNDS_COLUMNS, rows)
        if args.output:
            with open(args.output, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0
    if args.command == "run":
        rows = _summary_rows(cfg, ex.iter_cells(cfg, collect_tails=True))
        sys.stdout.write(ex.rows_to_text(SUMMARY_COLUMNS, rows))
        return 0
    if args.command == "sweep":
        out = ex.run_sweep(cfg)
        sys.stdout.write(ex.rows_to_text(ex.CURVE_COLUMNS[:-1], out.curves))
        return 0
    if args.command == "tails":
        cfg.curves_csv = None
        ex.run_sweep(cfg, tails=True)
        print(f"wrote {cfg.path(cfg.tails_csv or 'tails.csv')}")
        return 0
    if args.command == "validate":
        rows = ex.run_validate(cfg)
        sys.stdout.write(ex.rows_to_text(ex.VALIDATE_COLUMNS, rows))
        failed = [r for r in rows if not r["passed"]]
        if failed:
            print(f"{len(failed)} check(s) failed", file=sys.stderr)
            return 1
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
