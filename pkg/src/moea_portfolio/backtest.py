"""Quarterly multi-period driver and performance accounting."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .data_io import (
    FORWARD_OBS,
    HISTORY_OBS,
    PriceHistory,
    UniverseSnapshot,
    build_returns_matrix,
    compute_statistics,
    filter_universe,
    load_prices,
    load_risk_free,
    load_universe,
    read_risk_free,
    score_file_dates,
    score_file_name,
    universe_targets,
)
from .domain import ConstraintSet, Portfolio, check_constraints, turnover, weighted_market_cap
from .engine import EaParams
from .errors import (
    EmptyUniverseError,
    InfeasibleError,
    InvalidArgumentError,
    Phase1InfeasibleError,
    Phase2InfeasibleError,
    TurnoverRepairError,
)
from .phase1 import CandidatePortfolioSet, LARGE_CAP, LARGE_CAP_GROWTH, PHASE1_PRESETS, normalize_mandate, problem_for, run_phase1
from .phase2 import (
    LEDGER_SPARSE,
    PHASE2_PARAMS,
    PHASE2A_PARAMS,
    CandidateOutcome,
    WeightingProblem,
    market_cap_check,
    repair_turnover,
    run_phase2,
    select_winner,
)
from .synthetic import cap_weighted_period_return

log = logging.getLogger(__name__)

START_VALUE = 10_000.0
QUARTERS_PER_YEAR = 4
WINDOWS = {"1y": 4, "3y": 12, "5y": 20, "10y": 40}


@dataclass
class BacktestConfig:
    data_dir: Path
    price_path: Path | None = None
    risk_free_path: Path | None = None
    rebalance_dates: list[date] | None = None
    max_periods: int | None = None
    mandate: str = LARGE_CAP
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    phase1: EaParams | None = None
    phase2: EaParams = field(default_factory=lambda: replace(PHASE2_PARAMS))
    phase2a: EaParams = field(default_factory=lambda: replace(PHASE2A_PARAMS))
    weighting_strategy: int = LEDGER_SPARSE
    transaction_cost_bps: float = 10.0
    rng_seed: int = 0
    max_phase1_portfolios: int = 50
    max_phase2_candidates: int | None = None
    initial_popcount: int = 156
    score_floor: float = 20.0
    cap_fraction: float = 0.12
    cap_floor: float = 750e6
    history: int = HISTORY_OBS
    forward: int = FORWARD_OBS
    threads: int = 1
    trace_path: Path | None = None

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        self.mandate = normalize_mandate(self.mandate)
        if self.price_path is None:
            self.price_path = self.data_dir / "prices.csv"
        if self.risk_free_path is None:
            self.risk_free_path = self.data_dir / "risk_free.csv"
        if self.phase1 is None:
            self.phase1 = replace(PHASE1_PRESETS[self.mandate])

    def dates(self) -> list[date]:
        dates = list(self.rebalance_dates) if self.rebalance_dates else score_file_dates(self.data_dir)
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise InvalidArgumentError("rebalance dates must be strictly increasing")
        if self.max_periods is not None:
            dates = dates[: self.max_periods]
        if not dates:
            raise EmptyUniverseError(f"no score files found in {self.data_dir}")
        return dates


@dataclass
class PeriodResult:
    as_of: date
    end_date: date
    status: str
    n_candidates: int
    n_holdings: int
    gross_return: float
    net_return: float
    benchmark_return: float
    risk_free_return: float
    turnover: float
    turnover_budget: float
    turnover_breach: bool
    turnover_repaired: bool
    position_ok: bool
    cardinality_ok: bool
    market_cap_ok: bool
    book_to_price_ok: bool
    weighted_market_cap: float
    market_cap_target: float
    ex_ante_sharpe: float
    holdings: dict[str, float] = field(default_factory=dict, repr=False)
    events: list[str] = field(default_factory=list, repr=False)


PERIOD_COLUMNS = [
    "as_of", "end_date", "status", "n_candidates", "n_holdings", "gross_return", "net_return",
    "benchmark_return", "risk_free_return", "turnover", "turnover_budget", "turnover_breach",
    "turnover_repaired", "position_ok", "cardinality_ok", "market_cap_ok", "book_to_price_ok",
    "weighted_market_cap", "market_cap_target", "ex_ante_sharpe",
]


@dataclass
class PeriodContext:
    as_of: date
    universe: UniverseSnapshot
    filtered: UniverseSnapshot
    constraints: ConstraintSet
    risk_free: float


@dataclass
class BacktestReport:
    periods: list[PeriodResult]
    aggregate: dict
    benchmark: dict
    settings: dict = field(default_factory=dict)


def _derived_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1, dtype=np.uint64)[0] >> 1)


def period_performance(portfolio: Portfolio, forward_prices: pd.DataFrame, cost_bps: float,
                       turnover_value: float) -> tuple[float, float]:
    """Buy-and-hold gross return over the window and the cost-adjusted net return.

    ``forward_prices`` has the as-of price in row 0 and one column per
    holding.  Costs are ``cost_bps`` per unit of one-way turnover, charged on
    both sides of the trade.
    """
    if portfolio.is_empty:
        gross = 0.0
    else:
        rel = _relative_prices(portfolio, forward_prices)
        w = np.array(list(portfolio.holdings.values()))
        gross = float(w @ rel[-1] - w.sum())
    net = gross - cost_bps * 1e-4 * turnover_value * 2.0
    return gross, net


def _relative_prices(portfolio: Portfolio, forward_prices: pd.DataFrame) -> np.ndarray:
    ids = list(portfolio.holdings)
    block = forward_prices.reindex(columns=ids)
    if block.isna().to_numpy().any():
        gaps = [a for a in ids if block[a].isna().any()]
        log.warning("missing forward prices for %s; selling at last available price", gaps[:5])
        block = block.ffill()
    return (block / block.iloc[0]).to_numpy()


def drifted_weights(portfolio: Portfolio, forward_prices: pd.DataFrame) -> Portfolio:
    if portfolio.is_empty:
        return Portfolio()
    rel = _relative_prices(portfolio, forward_prices)[-1]
    ids = list(portfolio.holdings)
    value = np.array([portfolio.holdings[a] for a in ids]) * rel
    value = value / value.sum()
    return Portfolio({a: float(v) for a, v in zip(ids, value)}, as_of=None)


def aggregate_metrics(net_returns, benchmark_returns, risk_free_returns,
                      periods_per_year: int = QUARTERS_PER_YEAR) -> dict:
    """Cumulative value, trailing-window returns, Sharpe and information ratios.

    Ratios are annualized from per-period returns: means scale by
    ``periods_per_year`` and standard deviations by its square root.  A zero
    tracking error (or zero volatility) gives a ratio of 0 with a flag set.
    """
    net = np.asarray(net_returns, dtype=float)
    bench = np.asarray(benchmark_returns, dtype=float)
    rf = np.asarray(risk_free_returns, dtype=float)
    if len(net) < 2:
        raise InvalidArgumentError("need at least two periods")
    scale = math.sqrt(periods_per_year)

    def block(r):
        out = {"cumulative_value": START_VALUE * float(np.prod(1.0 + r))}
        windows = {}
        for name, q in WINDOWS.items():
            if len(r) >= q:
                total = float(np.prod(1.0 + r[-q:]) - 1.0)
                windows[name] = {"total": total, "annualized": (1.0 + total) ** (periods_per_year / q) - 1.0}
        out["windows"] = windows
        sd = float(np.std(r, ddof=1))
        excess = float(np.mean(r - rf))
        out["zero_volatility"] = sd == 0.0
        out["sharpe"] = 0.0 if sd == 0.0 else excess * periods_per_year / (sd * scale)
        return out

    port = block(net)
    active = net - bench
    te = float(np.std(active, ddof=1))
    port["zero_tracking_error"] = te == 0.0
    port["information_ratio"] = 0.0 if te == 0.0 else float(np.mean(active)) * periods_per_year / (te * scale)
    port["periods"] = len(net)
    return {"portfolio": port, "benchmark": block(bench)}


class Backtester:
    def __init__(self, config: BacktestConfig):
        self.config = config
        self.prices = load_prices(config.price_path)
        self.risk_free = read_risk_free(config.risk_free_path)
        growth = config.mandate == LARGE_CAP_GROWTH
        self.growth = growth

    def _constraints_for(self, filtered: UniverseSnapshot) -> ConstraintSet:
        cap, b2p = universe_targets(filtered)
        return replace(self.config.constraints, market_cap_target=cap,
                       book_to_price_ceiling=b2p if self.growth else None)

    def _choose_candidates(self, cps) -> list[int]:
        n = len(cps)
        limit = self.config.max_phase2_candidates
        if limit is None or n <= limit:
            return list(range(n))
        order = np.argsort(cps.objectives[:, 0], kind="stable")
        picks = np.unique(np.round(np.linspace(0, n - 1, limit)).astype(int))
        return sorted(int(order[i]) for i in picks)

    def _weight_candidate(self, k: int, i: int, members: list[str], snapshot_all: UniverseSnapshot,
                          filtered: UniverseSnapshot, constraints: ConstraintSet, previous: Portfolio,
                          rf: float) -> CandidateOutcome | None:
        cfg = self.config
        as_of = filtered.as_of
        lookup = snapshot_all.lookup()
        accept = market_cap_check(lookup, constraints.market_cap_target)
        stats = compute_statistics(build_returns_matrix(filtered, members, as_of))
        problem = WeightingProblem(members, stats, previous, constraints, rf, cfg.weighting_strategy)
        params = replace(cfg.phase2, rng_seed=_derived_seed(cfg.rng_seed, k, 2, i))
        events = []
        try:
            result = run_phase2(problem, params, as_of)
        except Phase2InfeasibleError as exc:
            log.warning("candidate %d at %s: %s", i, as_of, exc)
            return None
        best = result.best_where(accept, as_of) or result.best_sharpe
        budget = constraints.turnover_budget
        t = turnover(previous, best, constraints.turnover_convention)
        if t > budget + 1e-12 and not previous.is_empty:
            union = sorted(set(best.holdings) | {a for a in previous.holdings if a in lookup})
            ustats = compute_statistics(build_returns_matrix(snapshot_all, union, as_of, enforce_dimension=False))
            pa = replace(cfg.phase2a, rng_seed=_derived_seed(cfg.rng_seed, k, 3, i))
            try:
                best = repair_turnover(best, problem, pa, ustats, accept, as_of)
                events.append("turnover repaired")
            except TurnoverRepairError as exc:
                events.append(f"turnover repair failed: {exc}")
            t = turnover(previous, best, constraints.turnover_convention)
        sharpe = best.diagnostics.get("sharpe", float("nan"))
        if not math.isfinite(sharpe):
            sharpe = -math.inf
        return CandidateOutcome(
            index=i,
            portfolio=best,
            sharpe=sharpe,
            turnover=t,
            passes_market_cap=accept(best),
            passes_turnover=t <= budget + 1e-12,
            events=events,
        )

    def run(self) -> BacktestReport:
        cfg = self.config
        dates = cfg.dates()
        previous = Portfolio()
        priors: list[list[str]] = []
        periods = []
        for k, d in enumerate(dates):
            row, previous, priors = self._run_period(k, d, dates, previous, priors)
            periods.append(row)
        if len(periods) >= 2:
            agg = aggregate_metrics([p.net_return for p in periods], [p.benchmark_return for p in periods],
                                    [p.risk_free_return for p in periods])
        else:
            agg = {"portfolio": {}, "benchmark": {}}
        settings = {"mandate": cfg.mandate, "rng_seed": cfg.rng_seed,
                    "transaction_cost_bps": cfg.transaction_cost_bps,
                    "weighting_strategy": cfg.weighting_strategy,
                    "turnover_budget": cfg.constraints.turnover_budget,
                    "turnover_convention": cfg.constraints.turnover_convention}
        return BacktestReport(periods, agg["portfolio"], agg["benchmark"], settings)

    def context(self, d: date) -> "PeriodContext":
        cfg = self.config
        snapshot_all = load_universe(cfg.data_dir / score_file_name(d), self.prices, d, cfg.history, cfg.forward)
        filtered = filter_universe(snapshot_all, cfg.score_floor, cfg.cap_fraction, cfg.cap_floor)
        return PeriodContext(d, snapshot_all, filtered, self._constraints_for(filtered),
                             load_risk_free(self.risk_free, d))

    def select(self, k: int, ctx: "PeriodContext", priors=()) -> CandidatePortfolioSet:
        cfg = self.config
        problem = problem_for(ctx.filtered, cfg.mandate, ctx.constraints, priors, cfg.initial_popcount)
        params = replace(cfg.phase1, rng_seed=_derived_seed(cfg.rng_seed, k, 1))
        return run_phase1(problem, params, cfg.max_phase1_portfolios, cfg.trace_path)

    def weight(self, k: int, ctx: "PeriodContext", cps: CandidatePortfolioSet,
               previous: Portfolio) -> list[CandidateOutcome]:
        chosen = self._choose_candidates(cps)
        jobs = [(i, cps.members(i)) for i in chosen]

        def work(job):
            i, members = job
            return self._weight_candidate(k, i, members, ctx.universe, ctx.filtered, ctx.constraints,
                                          previous, ctx.risk_free)

        if self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                results = list(pool.map(work, jobs))
        else:
            results = [work(j) for j in jobs]
        return [r for r in results if r is not None]

    def _run_period(self, k, d, dates, previous, priors):
        cfg = self.config
        ctx = self.context(d)
        snapshot_all, constraints, rf_daily = ctx.universe, ctx.constraints, ctx.risk_free
        pos = self.prices.position(d)
        horizon = cfg.forward
        if k + 1 < len(dates):
            horizon = min(horizon, self.prices.position(dates[k + 1]) - pos)
        end = min(pos + horizon, len(self.prices.calendar) - 1)
        rf_period = (1.0 + rf_daily) ** (end - pos) - 1.0
        events: list[str] = []

        status = "ok"
        outcomes: list[CandidateOutcome] = []
        next_priors = priors
        try:
            cps = self.select(k, ctx, priors)
            next_priors = [cps.members(i) for i in range(len(cps)) if not cps.from_prior[i]]
            outcomes = self.weight(k, ctx, cps, previous)
            for r in outcomes:
                events.extend(f"candidate {r.index}: {e}" for e in r.events)
            n_candidates = len(cps)
        except (Phase1InfeasibleError, EmptyUniverseError) as exc:
            log.warning("period %s: %s; holding previous portfolio", d, exc)
            events.append(str(exc))
            n_candidates = 0

        if outcomes:
            winner = select_winner(outcomes)
            portfolio = Portfolio(dict(winner.portfolio.holdings), as_of=d,
                                  diagnostics=dict(winner.portfolio.diagnostics))
            sharpe = winner.sharpe
            repaired = bool(portfolio.diagnostics.get("turnover_repaired", False))
        else:
            if not events:
                events.append("phase 2 infeasible for every candidate")
            status = "hold-previous" if not previous.is_empty else "cash"
            portfolio = Portfolio(dict(previous.holdings), as_of=d)
            sharpe = float("nan")
            repaired = False

        t = turnover(previous, portfolio, constraints.turnover_convention)
        lookup = snapshot_all.lookup()
        if portfolio.is_empty:
            report = None
            wcap = 0.0
        else:
            in_universe = all(a in lookup for a in portfolio.holdings)
            wcap = weighted_market_cap(portfolio, lookup) if in_universe else float("nan")
            report = check_constraints(portfolio, constraints, previous, lookup) if in_universe else None

        block = self.prices.closes.iloc[pos:end + 1]
        gross, net = period_performance(portfolio, block, cfg.transaction_cost_bps, t)
        bench, _ = cap_weighted_period_return(snapshot_all.candidates, self.prices, d, end - pos)
        budget = constraints.turnover_budget

        def ok(name):
            if report is None or name not in report.checks:
                return name == "book_to_price" and not self.growth
            return report[name].passed

        row = PeriodResult(
            as_of=d,
            end_date=self.prices.calendar[end].date(),
            status=status,
            n_candidates=n_candidates,
            n_holdings=len(portfolio),
            gross_return=gross,
            net_return=net,
            benchmark_return=bench,
            risk_free_return=rf_period,
            turnover=t,
            turnover_budget=budget,
            turnover_breach=t > budget + 1e-12,
            turnover_repaired=repaired,
            position_ok=ok("position"),
            cardinality_ok=ok("cardinality"),
            market_cap_ok=ok("market_cap"),
            book_to_price_ok=ok("book_to_price"),
            weighted_market_cap=wcap,
            market_cap_target=constraints.market_cap_target,
            ex_ante_sharpe=sharpe,
            holdings=dict(sorted(portfolio.holdings.items())),
            events=events,
        )
        if not portfolio.is_empty and status == "ok":
            next_priors = next_priors + [sorted(portfolio.holdings)]
        if row.turnover_breach:
            log.warning("period %s: turnover %.4f exceeds budget %.4f", d, t, budget)
        return row, drifted_weights(portfolio, block), next_priors


def run_backtest(config: BacktestConfig) -> BacktestReport:
    return Backtester(config).run()


def phase1_for_date(config: BacktestConfig, as_of: date, priors=()) -> CandidatePortfolioSet:
    """Filter the universe at ``as_of`` and run stock selection once."""
    bt = Backtester(config)
    return bt.select(0, bt.context(as_of), priors)


def phase2_for_date(config: BacktestConfig, as_of: date, cps: CandidatePortfolioSet,
                    previous: Portfolio | None = None) -> tuple[CandidateOutcome, list[CandidateOutcome]]:
    """Weight every candidate at ``as_of`` and pick the winner.

    Raises Phase2InfeasibleError when no candidate can be weighted.
    """
    bt = Backtester(config)
    outcomes = bt.weight(0, bt.context(as_of), cps, previous or Portfolio())
    if not outcomes:
        raise Phase2InfeasibleError(f"no candidate at {as_of} could be weighted")
    return select_winner(outcomes), outcomes


def _fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


def write_report(report: BacktestReport, path_prefix) -> dict[str, Path]:
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    periods_path = prefix.parent / f"{prefix.name}_periods.csv"
    summary_path = prefix.parent / f"{prefix.name}_summary.json"
    holdings_dir = prefix.parent / f"{prefix.name}_holdings"
    try:
        with periods_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PERIOD_COLUMNS)
            for p in report.periods:
                w.writerow([_fmt(getattr(p, c)) for c in PERIOD_COLUMNS])
        summary = {
            "settings": report.settings,
            "portfolio": report.aggregate,
            "benchmark": report.benchmark,
            "turnover_breaches": [p.as_of.isoformat() for p in report.periods if p.turnover_breach],
            "events": {p.as_of.isoformat(): p.events for p in report.periods if p.events},
        }
        summary_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        holdings_dir.mkdir(exist_ok=True)
        for p in report.periods:
            with (holdings_dir / f"{p.as_of.isoformat()}.csv").open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["asset_id", "weight"])
                for a, wt in p.holdings.items():
                    w.writerow([a, repr(wt)])
    except OSError as exc:
        raise OSError(f"writing report under {prefix}: {exc}") from exc
    return {"periods": periods_path, "summary": summary_path, "holdings": holdings_dir}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def read_periods(path) -> pd.DataFrame:
    return pd.read_csv(path, parse_dates=["as_of", "end_date"])
