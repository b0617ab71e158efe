"""Command-line entry point.

Subcommands: gen-data, phase1, phase2, backtest, report.  Exit status is 0
on success, 1 on a usage error, 2 on a data error and 3 when the problem is
infeasible.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import (
    aggregate_metrics,
    phase1_for_date,
    phase2_for_date,
    read_periods,
    run_backtest,
    write_report,
)
from .config import backtest_config, default_config_text, read_config, resolve_path, synthetic_spec
from .domain import Portfolio
from .errors import DataError, InfeasibleError, InvalidArgumentError
from .phase1 import read_phase1_outputs, write_phase1_outputs
from .synthetic import generate_universe

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("moea_portfolio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _iso(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--mandate", choices=["large-cap", "large-cap-growth"])
    common.add_argument("--out", help="output directory or file prefix")
    common.add_argument("--threads", type=int, help="worker threads for candidate weighting")
    common.add_argument("--trace", type=Path, help="append per-generation JSON lines here")
    common.add_argument("--data", type=Path, help="data directory (overrides [data] dir)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="moea-portfolio", description="Two-phase evolutionary portfolio construction.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--print-config", action="store_true", help="print every default as TOML and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic market")

    p1 = sub.add_parser("phase1", parents=[common], help="stock selection for one rebalance date")
    p1.add_argument("--date", type=_iso, required=True)
    p1.add_argument("--prior", type=Path, action="append", default=[],
                    help="holdings CSV of an earlier portfolio to seed with (repeatable)")

    p2 = sub.add_parser("phase2", parents=[common], help="weight Phase-I candidates and pick a winner")
    p2.add_argument("--date", type=_iso, required=True)
    p2.add_argument("--phase1", required=True, help="prefix the phase1 subcommand wrote to")
    p2.add_argument("--previous", type=Path, help="holdings CSV of the previous winner")

    bt = sub.add_parser("backtest", parents=[common], help="run the quarterly loop")
    bt.add_argument("--dates", help="comma-separated rebalance dates")
    bt.add_argument("--max-periods", type=int)

    rp = sub.add_parser("report", parents=[common], help="summarize a periods CSV")
    rp.add_argument("periods", type=Path)
    return parser


def _raw_config(args) -> dict:
    return read_config(args.config) if args.config else {}


def _config(args, raw):
    cfg = backtest_config(raw, seed=args.seed, mandate=args.mandate, data_dir=args.data,
                          threads=args.threads, trace=args.trace)
    return cfg


def _out(args, raw, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return resolve_path(raw, raw.get("backtest", {}).get("out")) or Path(default)


def read_holdings(path) -> Portfolio:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return Portfolio({r["asset_id"]: float(r["weight"]) for r in rows})
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected asset_id,weight columns ({exc})") from None


def write_holdings(path, portfolio: Portfolio) -> None:
    lines = ["asset_id,weight"] + [f"{a},{w!r}" for a, w in sorted(portfolio.holdings.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_gen_data(args, raw) -> int:
    spec = synthetic_spec(raw, args.seed)
    out = args.out or args.data or resolve_path(raw, raw.get("data", {}).get("dir", "data"))
    files = generate_universe(spec, Path(out))
    print(f"wrote {len(files.score_files)} score files, prices and risk-free series to {files.directory}")
    return EXIT_OK


def cmd_phase1(args, raw) -> int:
    cfg = _config(args, raw)
    priors = [sorted(read_holdings(p).holdings) for p in args.prior]
    cps = phase1_for_date(cfg, args.date, priors)
    prefix = _out(args, raw, f"phase1_{args.date.isoformat()}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    obj, port = _phase1_paths(prefix)
    write_phase1_outputs(cps, obj, port)
    print(f"{len(cps)} candidate portfolios -> {obj}, {port}")
    return EXIT_OK


def _phase1_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return (prefix.parent / f"{prefix.name}_objectives.csv", prefix.parent / f"{prefix.name}_portfolios.csv")


def cmd_phase2(args, raw) -> int:
    cfg = _config(args, raw)
    obj, port = _phase1_paths(args.phase1)
    for p in (obj, port):
        if not p.exists():
            raise FileNotFoundError(f"no such file: {p}")
    cps = read_phase1_outputs(obj, port, args.date)
    previous = read_holdings(args.previous) if args.previous else Portfolio()
    winner, outcomes = phase2_for_date(cfg, args.date, cps, previous)
    prefix = _out(args, raw, f"phase2_{args.date.isoformat()}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    winner_path = prefix.parent / f"{prefix.name}_winner.csv"
    diag_path = prefix.parent / f"{prefix.name}_diagnostics.json"
    write_holdings(winner_path, winner.portfolio)
    diagnostics = {
        "as_of": args.date.isoformat(),
        "winner": winner.index,
        "candidates": [
            {"index": o.index, "sharpe": _finite(o.sharpe), "turnover": o.turnover,
             "passes_market_cap": o.passes_market_cap, "passes_turnover": o.passes_turnover,
             "n_holdings": len(o.portfolio), "events": o.events}
            for o in outcomes
        ],
    }
    diag_path.write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"winner: candidate {winner.index}, {len(winner.portfolio)} holdings, "
          f"Sharpe {winner.sharpe:.4f} -> {winner_path}")
    return EXIT_OK


def _finite(x: float):
    return x if np.isfinite(x) else None


def cmd_backtest(args, raw) -> int:
    cfg = _config(args, raw)
    if args.dates:
        cfg.rebalance_dates = [date.fromisoformat(d.strip()) for d in args.dates.split(",") if d.strip()]
    if args.max_periods is not None:
        cfg.max_periods = args.max_periods
    report = run_backtest(cfg)
    paths = write_report(report, _out(args, raw, "results/run"))
    _print_summary(report.aggregate, report.benchmark, len(report.periods))
    print(f"periods -> {paths['periods']}\nsummary -> {paths['summary']}")
    return EXIT_OK


def cmd_report(args, raw) -> int:
    if not args.periods.exists():
        raise FileNotFoundError(f"no such file: {args.periods}")
    df = read_periods(args.periods)
    if len(df) < 2:
        raise DataError(f"{args.periods}: need at least two periods to summarize")
    agg = aggregate_metrics(df["net_return"], df["benchmark_return"], df["risk_free_return"])
    print(df[["as_of", "status", "n_holdings", "net_return", "benchmark_return", "turnover",
              "turnover_breach"]].to_string(index=False))
    print()
    _print_summary(agg["portfolio"], agg["benchmark"], len(df))
    if args.out:
        Path(args.out).write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _print_summary(port: dict, bench: dict, n: int) -> None:
    if not port:
        print(f"{n} period(s); too few for aggregate statistics")
        return
    print(f"{'':24}{'portfolio':>14}{'benchmark':>14}")
    print(f"{'cumulative value':24}{port['cumulative_value']:>14.2f}{bench['cumulative_value']:>14.2f}")
    for name in port["windows"]:
        a, b = port["windows"][name], bench["windows"][name]
        print(f"{name + ' annualized':24}{a['annualized']:>14.4f}{b['annualized']:>14.4f}")
    print(f"{'Sharpe ratio':24}{port['sharpe']:>14.4f}{bench['sharpe']:>14.4f}")
    print(f"{'information ratio':24}{port['information_ratio']:>14.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "phase1": cmd_phase1,
    "phase2": cmd_phase2,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if not args.command:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print("moea-portfolio: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = _raw_config(args)
        return COMMANDS[args.command](args, raw)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgumentError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
