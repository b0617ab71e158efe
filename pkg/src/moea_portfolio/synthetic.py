"""Deterministic synthetic market: factor-model prices and scores with a tunable signal.

Daily simple returns are ``drift + loadings @ factors + noise``.  At every
rebalance date the score of each asset mixes the normal score of its rank by
return over the following 63 days (weight ``rho``) with an AR(1) noise term
(weight ``sqrt(1 - rho**2)``), and is mapped to [0, 100] through the normal
CDF.  ``rho = 2 sin(pi * ic / 6)`` makes the Spearman rank correlation
between score and forward return equal the configured ``ic``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from .data_io import (
    FORWARD_OBS,
    HISTORY_OBS,
    PriceHistory,
    load_prices,
    read_scores,
    score_file_dates,
    score_file_name,
    write_prices,
    write_risk_free,
    write_scores,
)
from .domain import Candidate
from .errors import InvalidArgumentError


@dataclass
class SyntheticSpec:
    n_assets: int = 400
    n_periods: int = 20
    n_days: int | None = None
    n_factors: int = 3
    rng_seed: int = 0
    start: str = "2000-01-03"
    drift: float = 0.0003
    market_vol: float = 0.009
    factor_vol: float = 0.004
    idio_vol: float = 0.016
    beta_dispersion: float = 0.25
    loading_dispersion: float = 0.5
    idio_vol_dispersion: float = 0.3
    cap_median: float = 5e9
    cap_sigma: float = 0.8
    book_to_price_median: float = 0.5
    book_to_price_sigma: float = 0.5
    information_coefficient: float = 0.05
    score_autocorrelation: float = 0.8
    risk_free_daily: float = 0.0001
    n_active: int | None = None
    churn: float = 0.0

    @property
    def days(self) -> int:
        return self.n_days if self.n_days is not None else HISTORY_OBS + FORWARD_OBS * self.n_periods + 1

    def rebalance_positions(self) -> list[int]:
        last = self.days - 1 - FORWARD_OBS
        return list(range(HISTORY_OBS, last + 1, FORWARD_OBS))

    def validate(self):
        if self.n_assets < 1 or self.n_factors < 1:
            raise InvalidArgumentError("need at least one asset and one factor")
        if self.days < HISTORY_OBS + FORWARD_OBS + 1:
            raise InvalidArgumentError(f"n_days must be at least {HISTORY_OBS + FORWARD_OBS + 1}")
        if not -1 < self.information_coefficient < 1:
            raise InvalidArgumentError("information coefficient must lie in (-1, 1)")
        if not 0 <= self.score_autocorrelation < 1:
            raise InvalidArgumentError("score autocorrelation must lie in [0, 1)")
        if not 0 <= self.churn <= 1:
            raise InvalidArgumentError("churn must lie in [0, 1]")
        if self.n_active is not None and not 1 <= self.n_active <= self.n_assets:
            raise InvalidArgumentError("n_active must lie in [1, n_assets]")


@dataclass
class SyntheticMarket:
    closes: pd.DataFrame
    scores: dict[date, list[Candidate]]
    risk_free: pd.Series
    loadings: np.ndarray = field(repr=False, default=None)


@dataclass
class GeneratedFiles:
    directory: Path
    prices: Path
    risk_free: Path
    score_files: list[Path]
    dates: list[date]


def asset_names(n: int) -> list[str]:
    width = max(4, len(str(n)))
    return [f"A{i:0{width}d}" for i in range(1, n + 1)]


def simulate(spec: SyntheticSpec) -> SyntheticMarket:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    n, T, K = spec.n_assets, spec.days, spec.n_factors
    ids = asset_names(n)
    calendar = pd.bdate_range(spec.start, periods=T)

    vols = np.full(K, spec.factor_vol)
    vols[0] = spec.market_vol
    factors = rng.standard_normal((T - 1, K)) * vols
    loadings = rng.standard_normal((n, K)) * spec.loading_dispersion
    loadings[:, 0] = 1.0 + spec.beta_dispersion * rng.standard_normal(n)
    idio = spec.idio_vol * np.exp(spec.idio_vol_dispersion * rng.standard_normal(n))
    noise = rng.standard_normal((T - 1, n)) * idio
    rets = np.clip(spec.drift + factors @ loadings.T + noise, -0.9, None)

    p0 = 20.0 * np.exp(0.5 * rng.standard_normal(n))
    prices = np.vstack([p0, p0 * np.cumprod(1.0 + rets, axis=0)])
    shares = spec.cap_median * np.exp(spec.cap_sigma * rng.standard_normal(n)) / p0
    book = spec.book_to_price_median * np.exp(spec.book_to_price_sigma * rng.standard_normal(n)) * p0

    positions = spec.rebalance_positions()
    rho = 2.0 * math.sin(math.pi * spec.information_coefficient / 6.0)
    a = spec.score_autocorrelation
    u = rng.standard_normal(n)
    active = _active_sets(spec, rng, len(positions))
    scores: dict[date, list[Candidate]] = {}
    for k, pos in enumerate(positions):
        if k:
            u = a * u + math.sqrt(1 - a * a) * rng.standard_normal(n)
        fwd = prices[pos + FORWARD_OBS] / prices[pos] - 1.0
        z = ndtri(rankdata(fwd) / (n + 1.0))
        latent = rho * z + math.sqrt(1 - rho * rho) * u
        score = 100.0 * ndtr(latent)
        cap = shares * prices[pos]
        b2p = book / prices[pos]
        scores[calendar[pos].date()] = [
            Candidate(ids[i], round(float(score[i]), 6), round(float(cap[i]), 2), round(float(b2p[i]), 8))
            for i in active[k]
        ]

    rf = spec.risk_free_daily * (1.0 + 0.2 * np.sin(np.arange(T) * 2 * np.pi / 252.0))
    closes = pd.DataFrame(prices, index=calendar, columns=ids)
    closes.index.name = "date"
    return SyntheticMarket(closes, scores, pd.Series(rf, index=calendar), loadings)


def _active_sets(spec: SyntheticSpec, rng, periods: int) -> list[np.ndarray]:
    n = spec.n_assets
    if spec.n_active is None or spec.n_active == n:
        return [np.arange(n)] * periods
    order = rng.permutation(n)
    current = np.sort(order[: spec.n_active])
    out = [current]
    swap = int(round(spec.churn * spec.n_active))
    for _ in range(1, periods):
        outside = np.setdiff1d(np.arange(n), current)
        leave = rng.choice(current, size=min(swap, len(current)), replace=False)
        enter = rng.choice(outside, size=min(len(leave), len(outside)), replace=False)
        current = np.sort(np.concatenate([np.setdiff1d(current, leave), enter]))
        out.append(current)
    return out


def generate_universe(spec: SyntheticSpec, out_dir) -> GeneratedFiles:
    """Write score files, the price file and the risk-free file under ``out_dir``."""
    market = simulate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    price_path = out / "prices.csv"
    write_prices(price_path, market.closes)
    rf_path = out / "risk_free.csv"
    write_risk_free(rf_path, market.risk_free)
    files = []
    for d, cands in market.scores.items():
        p = out / score_file_name(d)
        write_scores(p, cands)
        files.append(p)
    return GeneratedFiles(out, price_path, rf_path, files, list(market.scores))


def cap_weighted_period_return(candidates, prices: PriceHistory, as_of, horizon: int = FORWARD_OBS):
    """Buy-and-hold cap-weighted return of ``candidates`` from ``as_of`` over ``horizon`` days.

    Returns (period return, daily return series).
    """
    ids = [c.asset_id for c in candidates]
    caps = np.array([c.market_cap for c in candidates])
    w = caps / caps.sum()
    pos = prices.position(as_of)
    end = min(pos + horizon, len(prices.calendar) - 1)
    block = prices.closes[ids].iloc[pos:end + 1].ffill().to_numpy()
    rel = block / block[0]
    value = rel @ w
    daily = pd.Series(value[1:] / value[:-1] - 1.0, index=prices.calendar[pos + 1:end + 1])
    return float(value[-1] - 1.0), daily


def cap_weighted_benchmark(price_path, score_paths, horizon: int = FORWARD_OBS):
    """Quarterly-rebalanced cap-weighted benchmark over the score-file dates.

    ``score_paths`` is a directory of score files or a list of score files.
    Each holding period runs to the next rebalance date or ``horizon`` days,
    whichever comes first.  Returns (period returns by date, daily returns).
    """
    prices = price_path if isinstance(price_path, PriceHistory) else load_prices(price_path)
    if isinstance(score_paths, (str, Path)) and Path(score_paths).is_dir():
        directory = Path(score_paths)
        paths = [directory / score_file_name(d) for d in score_file_dates(directory)]
    else:
        paths = [Path(p) for p in score_paths]
    dated = sorted((date.fromisoformat(p.stem.split("_", 1)[1]), p) for p in paths)
    periods, daily_parts = {}, []
    for k, (d, p) in enumerate(dated):
        pos = prices.position(d)
        span = horizon
        if k + 1 < len(dated):
            span = min(horizon, prices.position(dated[k + 1][0]) - pos)
        cands = [c for c in read_scores(p) if c.asset_id in prices.closes.columns]
        r, daily = cap_weighted_period_return(cands, prices, d, span)
        periods[d] = r
        daily_parts.append(daily)
    daily = pd.concat(daily_parts) if daily_parts else pd.Series(dtype=float)
    return pd.Series(periods, dtype=float), daily
