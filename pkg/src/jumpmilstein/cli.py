"""Command line entry point: ``jumpmilstein {run,cost,list-models,plot}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exceptions import ConfigError, ExperimentFailure, JumpMilsteinError
from .experiment import (ExperimentConfig, cost_rows_to_csv, emit_report, parse_report_csv,
                         run_convergence_study, run_cost_study)
from .model import builtin_problem, list_problems

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3


def _cmd_run(args):
    cfg = ExperimentConfig.from_file(args.config)
    report = run_convergence_study(cfg)
    out = emit_report(report, "csv", cfg.output_csv)
    print(f"wrote {out}")
    if cfg.output_svg:
        print(f"wrote {emit_report(report, 'svg-plot', cfg.output_svg)}")
    for (scheme, p), fit in report.fits.items():
        lo, hi = fit.slope_vs_cost_ci
        print(f"{scheme:20s} p={p:g} rate vs cost {fit.slope_vs_cost:.3f} [{lo:.3f}, {hi:.3f}]"
              f"  rate vs delta {fit.slope_vs_delta:.3f}")
    return EXIT_OK


def _cmd_cost(args):
    cfg = ExperimentConfig.from_file(args.config)
    text = cost_rows_to_csv(run_cost_study(cfg))
    if cfg.output_csv:
        try:
            Path(cfg.output_csv).write_text(text)
        except OSError as exc:
            raise ExperimentFailure(f"cannot write {cfg.output_csv}: {exc}") from None
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_list(args):
    for name in list_problems():
        p = builtin_problem(name)
        print(f"{name}\tm={p.coefficients.m}\tlambda={p.lam:g}\tT={p.horizon:g}\txi={p.xi:g}")
    return EXIT_OK


def _cmd_plot(args):
    try:
        text = Path(args.input).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    try:
        report = parse_report_csv(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{args.input} is not a report CSV: {exc}") from None
    emit_report(report, "svg-plot", args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="jumpmilstein", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="coupled convergence study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("cost", help="mean-cost scaling study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_cost)
    p = sub.add_parser("list-models", help="list built-in problems")
    p.set_defaults(func=_cmd_list)
    p = sub.add_parser("plot", help="render a report CSV as an SVG log-log plot")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentFailure, JumpMilsteinError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
