"""Weight optimization for Phase I candidate portfolios.

SPEA2 evolves weight vectors against (negated mean return, variance,
turnover, position violation).  Every genome is normalized and repaired
with one of two ledger strategies before evaluation, and the repaired
weights replace the genome.  Portfolios whose best-Sharpe weighting breaks
the turnover budget go through a second, two-objective run (Sharpe against
turnover) in ``repair_turnover``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .domain import (
    ONE_WAY,
    TRADING_DAYS,
    Candidate,
    ConstraintSet,
    Portfolio,
    ReturnStatistics,
    position_violation,
    sharpe_ratio,
    turnover,
    weighted_market_cap,
)
from .engine import EaParams, Individual, run_spea2
from .errors import (
    DegeneratePortfolioError,
    InfeasibleCardinalityError,
    InvalidArgumentError,
    Phase2InfeasibleError,
    RepairFailure,
    TurnoverRepairError,
)

log = logging.getLogger(__name__)

LEDGER_SPARSE = 1
LEDGER_FULL = 2
MAX_LEDGER_PASSES = 100
LEDGER_TOL = 1e-9

PHASE2_PARAMS = EaParams(population_size=100, generations=600, mutation_rate=0.01)
PHASE2A_PARAMS = EaParams(population_size=50, generations=200, mutation_rate=0.02)


def normalize_weights(raw) -> np.ndarray:
    w = np.asarray(raw, dtype=float)
    if (w < 0).any():
        raise InvalidArgumentError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise DegeneratePortfolioError("all-zero weight genome")
    return w / total


def _settle_ledger(w: np.ndarray, ledger: float, holders: np.ndarray, min_w: float, max_w: float) -> float:
    """Spread ``ledger`` evenly over holders able to absorb it; return what is left.

    A positive ledger is weight still to hand out, a negative one weight
    still to take back.  Each pass gives every eligible holder an equal
    share, capped at its distance to the bound.
    """
    for _ in range(MAX_LEDGER_PASSES):
        if abs(ledger) < 1e-16:
            break
        room = np.where(holders, (max_w - w) if ledger > 0 else (w - min_w), 0.0)
        eligible = room > 1e-18
        k = int(eligible.sum())
        if k == 0:
            break
        take = np.minimum(room[eligible], abs(ledger) / k)
        if ledger > 0:
            w[eligible] += take
        else:
            w[eligible] -= take
        ledger -= math.copysign(take.sum(), ledger)
    return ledger


def _finish(w: np.ndarray, ledger: float, min_w: float, max_w: float) -> np.ndarray:
    if abs(ledger) >= LEDGER_TOL:
        raise RepairFailure(f"ledger balance {ledger:.3g} could not be redistributed")
    nz = w > 0
    w[nz] = np.clip(w[nz], min_w, max_w)
    return w


def repair_weights_strategy1(weights, min_w: float = 0.0035, max_w: float = 0.04) -> np.ndarray:
    """Sparse repair: tiny weights drop to zero, the rest move into [min_w, max_w]."""
    w = np.array(weights, dtype=float)
    half = min_w / 2.0
    ledger = 1.0 - w.sum()
    drop = w <= half
    ledger += w[drop].sum()
    w[drop] = 0.0
    up = (w > 0) & (w < min_w)
    ledger -= (min_w - w[up]).sum()
    w[up] = min_w
    over = w > max_w
    ledger += (w[over] - max_w).sum()
    w[over] = max_w
    ledger = _fit_holder_count(w, np.asarray(weights, dtype=float), ledger, min_w, max_w)
    ledger = _settle_ledger(w, ledger, w > 0, min_w, max_w)
    return _finish(w, ledger, min_w, max_w)


def _fit_holder_count(w: np.ndarray, original: np.ndarray, ledger: float, min_w: float, max_w: float) -> float:
    """Change the holder set until the bounds can absorb the ledger.

    Too few holders to carry the surplus: reinstate the largest dropped
    entries at ``min_w``.  Too many to give back a deficit: drop the
    smallest holders (the highest index among equals).
    """
    while True:
        held = w > 0
        if ledger > LEDGER_TOL and (max_w - w[held]).sum() < ledger - LEDGER_TOL:
            dropped = np.flatnonzero(~held)
            if not len(dropped):
                return ledger
            i = dropped[np.argmax(original[dropped])]
            w[i] = min_w
            ledger -= min_w
        elif ledger < -LEDGER_TOL and (w[held] - min_w).sum() < -ledger - LEDGER_TOL:
            idx = np.flatnonzero(held)
            if len(idx) <= 1:
                return ledger
            i = idx[::-1][np.argmin(w[idx][::-1])]
            ledger += w[i]
            w[i] = 0.0
        else:
            return ledger


def repair_weights_strategy2(weights, min_w: float = 0.0035, max_w: float = 0.04) -> np.ndarray:
    """Full repair: every asset keeps a weight inside [min_w, max_w]."""
    w = np.array(weights, dtype=float)
    n = len(w)
    if n * min_w > 1.0 + 1e-12 or n * max_w < 1.0 - 1e-12:
        raise InfeasibleCardinalityError(
            f"{n} assets cannot all hold weights in [{min_w}, {max_w}] summing to 1")
    ledger = 1.0 - w.sum()
    up = w < min_w
    ledger -= (min_w - w[up]).sum()
    w[up] = min_w
    over = w > max_w
    ledger += (w[over] - max_w).sum()
    w[over] = max_w
    ledger = _settle_ledger(w, ledger, np.ones(n, dtype=bool), min_w, max_w)
    return _finish(w, ledger, min_w, max_w)


def repair_weights(weights, strategy: int, min_w: float, max_w: float) -> np.ndarray:
    if strategy == LEDGER_SPARSE:
        return repair_weights_strategy1(weights, min_w, max_w)
    if strategy == LEDGER_FULL:
        return repair_weights_strategy2(weights, min_w, max_w)
    raise InvalidArgumentError(f"unknown weighting strategy {strategy!r}")


def _repair_rows(G: np.ndarray, strategy: int, min_w: float, max_w: float) -> np.ndarray:
    out = np.empty_like(G, dtype=float)
    n = G.shape[1]
    for i, row in enumerate(G):
        try:
            w = normalize_weights(row)
        except DegeneratePortfolioError:
            w = np.full(n, 1.0 / n)
        try:
            out[i] = repair_weights(w, strategy, min_w, max_w)
        except (RepairFailure, InfeasibleCardinalityError):
            # left unrepaired; the position objective prices the violation
            out[i] = w
    return out


def _position_objective(W: np.ndarray, min_w: float, max_w: float) -> np.ndarray:
    below = np.where(W > 0, np.clip(min_w - W, 0, None), 0.0).sum(axis=1)
    above = np.clip(W - max_w, 0, None).sum(axis=1)
    v = below + above
    return np.where(v > 1e-12, v, 0.0)


class _TurnoverMixin:
    def _set_previous(self, previous: Portfolio | None):
        self.previous = previous or Portfolio()
        self.prev_in = self.previous.weights_for(self.asset_ids)
        ids = set(self.asset_ids)
        self.prev_out = math.fsum(w for a, w in self.previous.holdings.items() if a not in ids)

    def turnovers(self, W: np.ndarray) -> np.ndarray:
        if self.previous.is_empty:
            return np.zeros(len(W))
        total = np.abs(W - self.prev_in[None, :]).sum(axis=1) + self.prev_out
        if self.constraints.turnover_convention == ONE_WAY:
            return np.minimum(0.5 * total, 1.0)
        return np.minimum(total, 2.0)


class WeightingProblem(_TurnoverMixin):
    encoding = "real"
    n_obj = 4

    def __init__(self, asset_ids: Sequence[str], stats: ReturnStatistics, previous_winner: Portfolio | None,
                 constraints: ConstraintSet, risk_free: float = 0.0, strategy: int = LEDGER_SPARSE):
        asset_ids = list(asset_ids)
        if list(stats.asset_ids) != asset_ids:
            raise InvalidArgumentError("statistics are not aligned with the asset list")
        if strategy not in (LEDGER_SPARSE, LEDGER_FULL):
            raise InvalidArgumentError(f"unknown weighting strategy {strategy!r}")
        self.asset_ids = asset_ids
        self.stats = stats
        self.constraints = constraints
        self.risk_free = risk_free
        self.strategy = strategy
        self.n_var = len(asset_ids)
        self.bounds = (0.0, constraints.max_weight)
        self._set_previous(previous_winner)

    def random_genomes(self, count: int, rng) -> np.ndarray:
        return rng.uniform(0.0, self.constraints.max_weight, size=(count, self.n_var))

    def repair(self, G: np.ndarray) -> np.ndarray:
        return _repair_rows(G, self.strategy, self.constraints.min_weight, self.constraints.max_weight)

    def evaluate(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        ret = W @ self.stats.mean_returns
        var = ((W @ self.stats.covariance) * W).sum(axis=1)
        return np.column_stack([
            -ret,
            np.maximum(var, 0.0),
            self.turnovers(W),
            _position_objective(W, self.constraints.min_weight, self.constraints.max_weight),
        ])

    def sharpe(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return sharpe_ratio(float(w @ self.stats.mean_returns),
                            float(w @ self.stats.covariance @ w), self.risk_free, TRADING_DAYS)

    def seed_from_previous(self) -> np.ndarray | None:
        if self.previous.is_empty or not self.prev_in.any():
            return None
        return self.prev_in / self.prev_in.sum()


def evaluate_weighting(weights, problem: WeightingProblem) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (problem.n_var,):
        raise InvalidArgumentError("weight vector does not match the problem")
    return problem.evaluate(w[None, :])[0]


def _describe(problem: WeightingProblem, w: np.ndarray, objectives, as_of=None, **extra) -> Portfolio:
    try:
        s = problem.sharpe(w)
    except DegeneratePortfolioError:
        s = float("nan")
    return Portfolio.from_weights(
        problem.asset_ids, w, as_of,
        sharpe=s,
        mean_return=float(w @ problem.stats.mean_returns),
        variance=float(w @ problem.stats.covariance @ w),
        turnover=float(problem.turnovers(w[None, :])[0]),
        objectives=[float(v) for v in objectives],
        **extra,
    )


@dataclass
class Phase2Result:
    pareto_set: list[tuple[np.ndarray, np.ndarray]]
    best_sharpe: Portfolio
    problem: WeightingProblem = field(repr=False, default=None)

    def portfolios(self, as_of=None) -> list[Portfolio]:
        feasible = [(w, f) for w, f in self.pareto_set if f[3] == 0]
        return [_describe(self.problem, w, f, as_of) for w, f in feasible]

    def best_where(self, accept: Callable[[Portfolio], bool], as_of=None) -> Portfolio | None:
        """Highest-Sharpe archive portfolio satisfying ``accept``; None if there is none."""
        best, best_s = None, -math.inf
        for p in self.portfolios(as_of):
            s = p.diagnostics["sharpe"]
            if math.isfinite(s) and s > best_s and accept(p):
                best, best_s = p, s
        return best


def run_phase2(problem: WeightingProblem, params: EaParams | None = None, as_of=None,
               trace_path=None) -> Phase2Result:
    params = params or PHASE2_PARAMS
    seeds = []
    prev = problem.seed_from_previous()
    if prev is not None:
        seeds.append(prev)
    result = run_spea2(problem, params, seeds=seeds, trace_path=trace_path)
    pareto = [(ind.genome.copy(), ind.objectives.copy()) for ind in result.archive]
    best, best_s = None, -math.inf
    for w, f in pareto:
        if f[3] != 0:
            continue
        try:
            s = problem.sharpe(w)
        except DegeneratePortfolioError:
            continue
        if s > best_s:
            best, best_s = (w, f), s
    if best is None:
        raise Phase2InfeasibleError("no weighting satisfied the position bounds")
    return Phase2Result(pareto, _describe(problem, best[0], best[1], as_of), problem)


class TurnoverProblem(_TurnoverMixin):
    """Sharpe against turnover over a fixed asset set, sparse repair."""

    encoding = "real"
    n_obj = 2

    def __init__(self, stats: ReturnStatistics, previous: Portfolio, constraints: ConstraintSet,
                 risk_free: float):
        self.asset_ids = list(stats.asset_ids)
        self.stats = stats
        self.constraints = constraints
        self.risk_free = risk_free
        self.n_var = len(self.asset_ids)
        self.bounds = (0.0, constraints.max_weight)
        self._set_previous(previous)

    def random_genomes(self, count: int, rng) -> np.ndarray:
        return rng.uniform(0.0, self.constraints.max_weight, size=(count, self.n_var))

    def repair(self, G: np.ndarray) -> np.ndarray:
        return _repair_rows(G, LEDGER_SPARSE, self.constraints.min_weight, self.constraints.max_weight)

    def sharpes(self, W: np.ndarray) -> np.ndarray:
        ret = W @ self.stats.mean_returns
        var = ((W @ self.stats.covariance) * W).sum(axis=1)
        sd = np.sqrt(np.maximum(var, 0.0))
        excess = (ret - self.risk_free) * TRADING_DAYS
        with np.errstate(divide="ignore", invalid="ignore"):
            s = excess / (sd * math.sqrt(TRADING_DAYS))
        return np.where(sd > 0, s, 0.0)

    def evaluate(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        viol = _position_objective(W, self.constraints.min_weight, self.constraints.max_weight)
        penalty = np.where(viol > 0, 10.0 * (1.0 + viol), 0.0)
        return np.column_stack([-self.sharpes(W) + penalty, self.turnovers(W) + penalty])


def repair_turnover(best_sharpe: Portfolio, problem: WeightingProblem, params: EaParams | None = None,
                    stats: ReturnStatistics | None = None,
                    accept: Callable[[Portfolio], bool] | None = None,
                    as_of=None) -> Portfolio:
    """Trade Sharpe against turnover until the turnover budget is met.

    ``stats`` must cover the best-Sharpe holdings plus the previous winner's
    holdings (assets missing from ``stats`` are treated as sold).  Among all
    evaluated weightings that meet the position bounds and the budget, the
    highest Sharpe wins, preferring ones that satisfy ``accept``.
    """
    budget = problem.constraints.turnover_budget
    if turnover(problem.previous, best_sharpe, problem.constraints.turnover_convention) <= budget + 1e-12:
        return best_sharpe
    params = params or PHASE2A_PARAMS
    if stats is None:
        stats = problem.stats
    ids = list(stats.asset_ids)
    missing = [a for a in best_sharpe.holdings if a not in set(ids)]
    if missing:
        raise InvalidArgumentError(f"statistics do not cover holdings {missing[:5]}")
    tp = TurnoverProblem(stats, problem.previous, problem.constraints, problem.risk_free)
    best_w = best_sharpe.weights_for(ids)
    prev_w = tp.prev_in.copy()
    seeds = [best_w]
    if prev_w.sum() > 0:
        prev_w = prev_w / prev_w.sum()
        seeds.append(prev_w)
        seeds += [(1 - lam) * best_w + lam * prev_w for lam in (0.25, 0.5, 0.75)]
    seeds = seeds[: params.population_size]
    result = run_spea2(tp, params, seeds=seeds)

    seeded = tp.repair(np.array(seeds))
    pool = [seeded] + [np.array([ind.genome for ind in result.internal_archive])]
    pool.append(np.array([ind.genome for ind in result.population]))
    W = np.concatenate(pool)
    F = tp.evaluate(W)
    ok = (_position_objective(W, problem.constraints.min_weight, problem.constraints.max_weight) == 0) \
        & (tp.turnovers(W) <= budget + 1e-12)
    if not ok.any():
        raise TurnoverRepairError("no weighting met the turnover budget")
    sharpes = tp.sharpes(W)
    order = [i for i in np.argsort(-sharpes, kind="stable") if ok[i]]
    chosen = order[0]
    if accept is not None:
        for i in order:
            p = Portfolio.from_weights(ids, W[i], as_of)
            if accept(p):
                chosen = i
                break
    w = W[chosen]
    out = Portfolio.from_weights(
        ids, w, as_of,
        sharpe=float(sharpes[chosen]),
        mean_return=float(w @ stats.mean_returns),
        variance=float(w @ stats.covariance @ w),
        turnover=float(tp.turnovers(w[None, :])[0]),
        objectives=[float(v) for v in F[chosen]],
        turnover_repaired=True,
    )
    return out


@dataclass
class CandidateOutcome:
    index: int
    portfolio: Portfolio
    sharpe: float
    turnover: float
    passes_market_cap: bool
    passes_turnover: bool
    events: list[str] = field(default_factory=list)


def select_winner(results: Sequence[CandidateOutcome]) -> CandidateOutcome:
    """Best Sharpe among outcomes passing market cap and turnover, else lowest turnover."""
    if not results:
        raise InvalidArgumentError("no Phase II results to choose from")
    ordered = sorted(results, key=lambda r: r.index)
    passing = [r for r in ordered if r.passes_market_cap and r.passes_turnover]
    if passing:
        return max(passing, key=lambda r: (r.sharpe, -r.index))
    return min(ordered, key=lambda r: (r.turnover, r.index))


def market_cap_check(universe: dict[str, Candidate], target: float) -> Callable[[Portfolio], bool]:
    def accept(p: Portfolio) -> bool:
        return weighted_market_cap(p, universe) >= target
    return accept
