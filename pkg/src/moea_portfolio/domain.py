"""Portfolio types, statistics and the constraint checks shared by both phases."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np

from .errors import DataConsistencyError, DegeneratePortfolioError, InvalidArgumentError

TRADING_DAYS = 252
ONE_WAY = "one-way"
TWO_WAY = "two-way"


@dataclass(frozen=True)
class Candidate:
    asset_id: str
    score: float
    market_cap: float
    book_to_price: float

    def __post_init__(self):
        if not self.market_cap > 0:
            raise InvalidArgumentError(f"{self.asset_id}: market cap must be positive")
        if not math.isfinite(self.score):
            raise InvalidArgumentError(f"{self.asset_id}: score must be finite")
        if not self.book_to_price > 0:
            raise InvalidArgumentError(f"{self.asset_id}: book-to-price must be positive")


@dataclass
class ConstraintSet:
    min_weight: float = 0.0035
    max_weight: float = 0.04
    monthly_turnover_cap: float = 0.08
    rebalance_months: int = 3
    market_cap_target: float = 0.0
    book_to_price_ceiling: float | None = None
    turnover_convention: str = ONE_WAY

    def __post_init__(self):
        if not 0 < self.min_weight < self.max_weight <= 1:
            raise InvalidArgumentError("need 0 < min_weight < max_weight <= 1")
        if not 0 < self.monthly_turnover_cap <= 1:
            raise InvalidArgumentError("monthly_turnover_cap must lie in (0, 1]")
        if self.turnover_convention not in (ONE_WAY, TWO_WAY):
            raise InvalidArgumentError(f"unknown turnover convention {self.turnover_convention!r}")

    @property
    def turnover_budget(self) -> float:
        return self.rebalance_months * self.monthly_turnover_cap

    @property
    def cardinality(self) -> tuple[int, int]:
        return cardinality_bounds(self.min_weight, self.max_weight)


@dataclass
class Portfolio:
    holdings: dict[str, float] = field(default_factory=dict)
    as_of: date | None = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_weights(cls, asset_ids: Sequence[str], weights, as_of=None, **diagnostics) -> "Portfolio":
        holdings = {a: float(w) for a, w in zip(asset_ids, weights) if w > 0}
        return cls(holdings=holdings, as_of=as_of, diagnostics=dict(diagnostics))

    @property
    def is_empty(self) -> bool:
        return not self.holdings

    def weights_for(self, asset_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.holdings.get(a, 0.0) for a in asset_ids])

    def total_weight(self) -> float:
        return math.fsum(self.holdings.values())

    def __len__(self):
        return len(self.holdings)


@dataclass
class ReturnStatistics:
    asset_ids: list[str]
    mean_returns: np.ndarray
    covariance: np.ndarray
    observation_count: int


@dataclass
class ConstraintCheck:
    passed: bool
    violation: float = 0.0


@dataclass
class ConstraintReport:
    checks: dict[str, ConstraintCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, name: str) -> ConstraintCheck:
        return self.checks[name]

    def to_dict(self) -> dict:
        return {k: {"passed": v.passed, "violation": v.violation} for k, v in self.checks.items()}


def cardinality_bounds(min_weight: float, max_weight: float) -> tuple[int, int]:
    """Holding-count range implied by the position limits.

    The upper bound rounds 1/min_weight to nearest (1/0.0035 = 285.7 -> 286),
    the lower bound takes the ceiling of 1/max_weight.
    """
    if not 0 < min_weight < max_weight <= 1:
        raise InvalidArgumentError("need 0 < min_weight < max_weight <= 1")
    max_n = math.floor(1.0 / min_weight + 0.5)
    min_n = math.ceil(1.0 / max_weight - 1e-9)
    return min_n, max_n


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def portfolio_mean_return(weights, mean_returns) -> float:
    w, mu = _vec(weights), _vec(mean_returns)
    if w.shape != mu.shape:
        raise InvalidArgumentError(f"dimension mismatch: {w.shape} vs {mu.shape}")
    return float(w @ mu)


def portfolio_variance(weights, covariance) -> float:
    w, cov = _vec(weights), _vec(covariance)
    if cov.shape != (w.size, w.size):
        raise InvalidArgumentError(f"dimension mismatch: {w.shape} vs {cov.shape}")
    return max(float(w @ cov @ w), 0.0)


def sharpe_ratio(mean_return: float, variance: float, risk_free_rate: float,
                 periods_per_year: int = TRADING_DAYS) -> float:
    if not variance > 0:
        raise DegeneratePortfolioError("Sharpe ratio undefined for zero variance")
    excess = (mean_return - risk_free_rate) * periods_per_year
    return excess / (math.sqrt(variance) * math.sqrt(periods_per_year))


def turnover(previous: Portfolio | Mapping | None, proposed: Portfolio | Mapping,
             convention: str = ONE_WAY) -> float:
    """Share of NAV traded moving from ``previous`` to ``proposed``.

    One-way turnover is half the summed absolute weight changes over the
    union of holdings.  An empty previous portfolio (inception) gives 0.
    """
    prev = previous.holdings if isinstance(previous, Portfolio) else (previous or {})
    new = proposed.holdings if isinstance(proposed, Portfolio) else proposed
    if not prev:
        return 0.0
    total = math.fsum(abs(new.get(a, 0.0) - prev.get(a, 0.0)) for a in set(prev) | set(new))
    if convention == ONE_WAY:
        return min(0.5 * total, 1.0)
    if convention == TWO_WAY:
        return min(total, 2.0)
    raise InvalidArgumentError(f"unknown turnover convention {convention!r}")


def _universe_lookup(universe) -> dict:
    if isinstance(universe, Mapping):
        return dict(universe)
    return {c.asset_id: c for c in universe}


def weighted_market_cap(portfolio: Portfolio, universe) -> float:
    lookup = _universe_lookup(universe)
    missing = [a for a in portfolio.holdings if a not in lookup]
    if missing:
        raise DataConsistencyError(f"holdings missing from universe: {sorted(missing)[:5]}")
    return math.fsum(w * lookup[a].market_cap for a, w in portfolio.holdings.items())


def weighted_book_to_price(portfolio: Portfolio, universe) -> float:
    lookup = _universe_lookup(universe)
    missing = [a for a in portfolio.holdings if a not in lookup]
    if missing:
        raise DataConsistencyError(f"holdings missing from universe: {sorted(missing)[:5]}")
    total = portfolio.total_weight()
    return math.fsum(w * lookup[a].book_to_price for a, w in portfolio.holdings.items()) / total


def position_violation(weights, min_weight: float, max_weight: float) -> float:
    w = _vec(weights)
    nz = w[w > 0]
    return float(np.clip(min_weight - nz, 0, None).sum() + np.clip(nz - max_weight, 0, None).sum())


def check_constraints(portfolio: Portfolio, constraints: ConstraintSet,
                      previous: Portfolio | None, universe, tol: float = 1e-12) -> ConstraintReport:
    """Evaluate every portfolio constraint; violations are reported, not raised."""
    checks = {}
    min_n, max_n = constraints.cardinality
    n = sum(1 for w in portfolio.holdings.values() if w > 0)
    card_violation = float(max(min_n - n, 0) + max(n - max_n, 0))
    checks["cardinality"] = ConstraintCheck(card_violation == 0, card_violation)

    pos = position_violation(list(portfolio.holdings.values()), constraints.min_weight, constraints.max_weight)
    checks["position"] = ConstraintCheck(pos <= tol, pos)

    cap = weighted_market_cap(portfolio, universe) if portfolio.holdings else 0.0
    cap_short = max(constraints.market_cap_target - cap, 0.0)
    checks["market_cap"] = ConstraintCheck(cap_short <= tol * max(constraints.market_cap_target, 1.0), cap_short)

    if constraints.book_to_price_ceiling is not None:
        b2p = weighted_book_to_price(portfolio, universe) if portfolio.holdings else 0.0
        excess = max(b2p - constraints.book_to_price_ceiling, 0.0)
        checks["book_to_price"] = ConstraintCheck(excess <= tol, excess)

    t = turnover(previous, portfolio, constraints.turnover_convention)
    over = max(t - constraints.turnover_budget, 0.0)
    checks["turnover"] = ConstraintCheck(over <= tol, over)
    return ConstraintReport(checks)
