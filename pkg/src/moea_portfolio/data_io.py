"""Score, price and risk-free file handling plus the candidate pre-filters.

File formats (CSV, ISO dates, decimal point):

* scores_YYYY-MM-DD.csv: ``asset_id,score,market_cap_usd,book_to_price``
* prices: ``date,asset_id,close_usd`` in long format, trading days only
* risk free: ``date,daily_rate``
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import Candidate, ReturnStatistics
from .errors import (
    DataConsistencyError,
    EmptyUniverseError,
    InsufficientHistoryError,
    InvalidArgumentError,
    ParseError,
)

log = logging.getLogger(__name__)

SCORE_HEADER = ["asset_id", "score", "market_cap_usd", "book_to_price"]
PRICE_HEADER = ["date", "asset_id", "close_usd"]
RISK_FREE_HEADER = ["date", "daily_rate"]
SCORE_FILE_RE = re.compile(r"^scores_(\d{4}-\d{2}-\d{2})\.csv$")

HISTORY_OBS = 287
FORWARD_OBS = 63
MIN_RETURNS = 126
MAX_FILL_DAYS = 5


@dataclass
class PriceHistory:
    """Wide close-price table: trading-day index by asset columns.

    Gaps of up to ``MAX_FILL_DAYS`` consecutive days are forward filled at
    load time; longer gaps stay NaN.
    """

    closes: pd.DataFrame

    @property
    def calendar(self) -> pd.DatetimeIndex:
        return self.closes.index

    def position(self, as_of) -> int:
        """Index of the last trading day on or before ``as_of``."""
        ts = pd.Timestamp(as_of)
        pos = int(self.calendar.searchsorted(ts, side="right")) - 1
        if pos < 0:
            raise InsufficientHistoryError(f"{as_of} precedes the price calendar")
        return pos


@dataclass
class UniverseSnapshot:
    as_of: date
    candidates: list[Candidate]
    prices: PriceHistory
    excluded: dict[str, str] = field(default_factory=dict)
    # caps of every candidate loaded for this date, before any filtering
    reference_caps: dict[str, float] = field(default_factory=dict)

    @property
    def asset_ids(self) -> list[str]:
        return [c.asset_id for c in self.candidates]

    def lookup(self) -> dict[str, Candidate]:
        return {c.asset_id: c for c in self.candidates}

    def __len__(self):
        return len(self.candidates)


@dataclass
class ReturnsMatrix:
    asset_ids: list[str]
    observations: np.ndarray
    window: tuple[date, date]


def score_file_name(as_of) -> str:
    return f"scores_{pd.Timestamp(as_of).date().isoformat()}.csv"


def score_file_dates(directory) -> list[date]:
    out = []
    for p in Path(directory).iterdir():
        m = SCORE_FILE_RE.match(p.name)
        if m:
            out.append(date.fromisoformat(m.group(1)))
    return sorted(out)


def _open_csv(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path.open(newline="", encoding="utf-8")


def _float(text: str, path, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: not a number: {text!r}", path, line) from None
    if not math.isfinite(value):
        raise ParseError(f"column {column!r}: non-finite value {text!r}", path, line)
    return value


def read_scores(path) -> list[Candidate]:
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SCORE_HEADER:
            raise ParseError(f"expected header {','.join(SCORE_HEADER)}", path, 1)
        seen = set()
        out = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", path, line)
            asset_id = row[0].strip()
            if not asset_id:
                raise ParseError("empty asset_id", path, line)
            if asset_id in seen:
                raise ParseError(f"duplicate asset_id {asset_id!r}", path, line)
            seen.add(asset_id)
            try:
                out.append(Candidate(
                    asset_id,
                    _float(row[1], path, line, "score"),
                    _float(row[2], path, line, "market_cap_usd"),
                    _float(row[3], path, line, "book_to_price"),
                ))
            except InvalidArgumentError as exc:
                raise ParseError(str(exc), path, line) from None
    return out


def write_scores(path, candidates) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for c in candidates:
            w.writerow([c.asset_id, repr(float(c.score)), repr(float(c.market_cap)), repr(float(c.book_to_price))])


def load_prices(path) -> PriceHistory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        df = pd.read_csv(path, dtype={"asset_id": str}, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise ParseError(str(exc), path) from None
    if list(df.columns) != PRICE_HEADER:
        raise ParseError(f"expected header {','.join(PRICE_HEADER)}", path, 1)
    try:
        df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d")
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad date: {exc}", path) from None
    close = pd.to_numeric(df["close_usd"], errors="coerce")
    bad = close.isna() | ~np.isfinite(close) | (close <= 0)
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise ParseError(f"bad close price {df['close_usd'].iloc[line - 2]!r}", path, line)
    df["close_usd"] = close
    dup = df.duplicated(["date", "asset_id"])
    if dup.any():
        line = int(np.flatnonzero(dup.to_numpy())[0]) + 2
        raise ParseError(f"duplicate price for {df['asset_id'].iloc[line - 2]!r}", path, line)
    wide = df.pivot(index="date", columns="asset_id", values="close_usd").sort_index()
    wide = wide.ffill(limit=MAX_FILL_DAYS)
    return PriceHistory(wide)


def write_prices(path, closes: pd.DataFrame, float_format: str = "%.6f") -> None:
    long = closes.stack().rename("close_usd").reset_index()
    long.columns = PRICE_HEADER
    long["date"] = long["date"].dt.strftime("%Y-%m-%d")
    long.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def _history_problem(prices: PriceHistory, asset_id: str, pos: int, back: int, forward: int) -> str | None:
    if asset_id not in prices.closes.columns:
        return "no price history"
    if pos < back:
        return f"only {pos} observations before as-of, need {back}"
    end = pos + forward
    if end >= len(prices.calendar):
        return f"fewer than {forward} forward observations"
    window = prices.closes[asset_id].to_numpy()[pos - back:end + 1]
    missing = int(np.isnan(window).sum())
    if missing:
        return f"{missing} missing prices in the required window"
    return None


def load_universe(score_path, price_path, as_of, history: int = HISTORY_OBS,
                  forward: int = FORWARD_OBS) -> UniverseSnapshot:
    """Join one score file with price history.

    ``price_path`` may be a path or an already loaded ``PriceHistory``.
    Assets without ``history`` prior and ``forward`` later prices around
    ``as_of`` are dropped and recorded in ``excluded``.
    """
    prices = price_path if isinstance(price_path, PriceHistory) else load_prices(price_path)
    candidates = read_scores(score_path)
    pos = prices.position(as_of)
    kept, excluded = [], {}
    for c in candidates:
        reason = _history_problem(prices, c.asset_id, pos, history, forward)
        if reason is None:
            kept.append(c)
        else:
            excluded[c.asset_id] = reason
            log.info("excluding %s at %s: %s", c.asset_id, as_of, reason)
    if not kept:
        raise EmptyUniverseError(f"no candidate in {score_path} has the required price history")
    return UniverseSnapshot(
        as_of=pd.Timestamp(as_of).date(),
        candidates=kept,
        prices=prices,
        excluded=excluded,
        reference_caps={c.asset_id: c.market_cap for c in kept},
    )


def filter_universe(snapshot: UniverseSnapshot, score_floor: float = 20.0, cap_fraction: float = 0.12,
                    cap_floor: float = 750e6) -> UniverseSnapshot:
    """Drop low scores, then small caps.

    The small-cap cutoff is the cap at rank ``floor(cap_fraction * N)`` of the
    snapshot's reference universe (ties broken by asset id).  When that cap
    exceeds ``cap_floor`` only candidates below ``cap_floor`` go.  Because the
    cutoff is taken from the reference universe the filter is idempotent.
    """
    if not snapshot.candidates:
        raise EmptyUniverseError("cannot filter an empty universe")
    if not 0 <= cap_fraction < 1:
        raise InvalidArgumentError("cap_fraction must lie in [0, 1)")
    reference = snapshot.reference_caps or {c.asset_id: c.market_cap for c in snapshot.candidates}
    ranked = sorted(reference.items(), key=lambda kv: (kv[1], kv[0]))
    cut = math.floor(cap_fraction * len(ranked))

    def small(c: Candidate) -> bool:
        if cut == 0:
            return False
        level_id, level_cap = ranked[cut - 1]
        if level_cap > cap_floor:
            return c.market_cap < cap_floor
        return (c.market_cap, c.asset_id) <= (level_cap, level_id)

    kept = [c for c in snapshot.candidates if c.score >= score_floor and not small(c)]
    if not kept:
        raise EmptyUniverseError(f"every candidate at {snapshot.as_of} was filtered out")
    return replace(snapshot, candidates=kept, reference_caps=dict(reference))


def returns_window_length(n_assets: int, min_obs: int = MIN_RETURNS, max_obs: int = HISTORY_OBS) -> int:
    return int(min(max(n_assets + 1, min_obs), max_obs))


def build_returns_matrix(snapshot: UniverseSnapshot, asset_ids, as_of=None, max_obs: int = HISTORY_OBS,
                         min_obs: int = MIN_RETURNS, enforce_dimension: bool = True) -> ReturnsMatrix:
    """Daily simple returns over the ``clamp(N + 1, min_obs, max_obs)`` days ending at ``as_of``."""
    asset_ids = list(asset_ids)
    if enforce_dimension and len(asset_ids) >= max_obs:
        raise InvalidArgumentError(f"{len(asset_ids)} assets cannot be estimated from {max_obs} returns")
    prices = snapshot.prices
    pos = prices.position(as_of if as_of is not None else snapshot.as_of)
    T = returns_window_length(len(asset_ids), min_obs, max_obs)
    if pos < T:
        raise InsufficientHistoryError(f"need {T + 1} prices before {as_of}, calendar has {pos + 1}")
    missing = [a for a in asset_ids if a not in prices.closes.columns]
    if missing:
        raise InsufficientHistoryError(f"no price history for {missing[0]}")
    block = prices.closes[asset_ids].to_numpy()[pos - T:pos + 1]
    bad = np.isnan(block).any(axis=0)
    if bad.any():
        raise InsufficientHistoryError(f"missing prices for {asset_ids[int(np.flatnonzero(bad)[0])]}")
    rets = block[1:] / block[:-1] - 1.0
    cal = prices.calendar
    return ReturnsMatrix(asset_ids, rets, (cal[pos - T + 1].date(), cal[pos].date()))


def compute_statistics(matrix: ReturnsMatrix) -> ReturnStatistics:
    X = np.asarray(matrix.observations, dtype=float)
    T = X.shape[0]
    if T < 2:
        raise InvalidArgumentError("need at least two observations")
    mean = X.mean(axis=0)
    dev = X - mean
    # a constant column has exactly zero spread, whatever the rounding of its mean
    flat = (X == X[0]).all(axis=0)
    mean[flat] = X[0, flat]
    dev[:, flat] = 0.0
    cov = dev.T @ dev / (T - 1)
    cov = 0.5 * (cov + cov.T)
    return ReturnStatistics(list(matrix.asset_ids), mean, cov, T)


def universe_targets(snapshot: UniverseSnapshot) -> tuple[float, float]:
    if not snapshot.candidates:
        raise EmptyUniverseError("no candidates")
    caps = [c.market_cap for c in snapshot.candidates]
    b2p = [c.book_to_price for c in snapshot.candidates]
    return math.fsum(caps) / len(caps), math.fsum(b2p) / len(b2p)


def read_risk_free(path) -> pd.Series:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise OSError(f"empty risk-free file: {path}")
        if [h.strip() for h in header] != RISK_FREE_HEADER:
            raise ParseError(f"expected header {','.join(RISK_FREE_HEADER)}", path, 1)
        dates, rates = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", path, line)
            try:
                dates.append(date.fromisoformat(row[0].strip()))
            except ValueError:
                raise ParseError(f"bad date {row[0]!r}", path, line) from None
            rates.append(_float(row[1], path, line, "daily_rate"))
    if not dates:
        raise OSError(f"empty risk-free file: {path}")
    return pd.Series(rates, index=pd.DatetimeIndex(dates)).sort_index()


def load_risk_free(rf_path, as_of) -> float:
    """Rate whose date is nearest ``as_of``; the earlier date wins ties."""
    series = rf_path if isinstance(rf_path, pd.Series) else read_risk_free(rf_path)
    if series.empty:
        raise OSError("empty risk-free series")
    gaps = np.abs((series.index - pd.Timestamp(as_of)).days.to_numpy())
    best = int(np.flatnonzero(gaps == gaps.min())[0])
    return float(series.iloc[best])


def write_risk_free(path, series: pd.Series) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RISK_FREE_HEADER)
        for d, r in series.items():
            w.writerow([pd.Timestamp(d).date().isoformat(), repr(float(r))])


def check_alignment(snapshot: UniverseSnapshot, asset_ids) -> None:
    lookup = snapshot.lookup()
    missing = [a for a in asset_ids if a not in lookup]
    if missing:
        raise DataConsistencyError(f"assets not in universe at {snapshot.as_of}: {missing[:5]}")
