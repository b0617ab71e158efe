import logging
import math

import numpy as np
import pandas as pd
import pytest
from scipy.stats import spearmanr

from moea_portfolio.data_io import FORWARD_OBS, load_prices, load_universe, read_scores, write_prices, write_scores
from moea_portfolio.domain import Candidate
from moea_portfolio.errors import InvalidArgumentError
from moea_portfolio.synthetic import SyntheticSpec, cap_weighted_benchmark, generate_universe, simulate


def test_regeneration_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_assets=400, n_periods=2, rng_seed=7)
    a = generate_universe(spec, tmp_path / "a")
    b = generate_universe(spec, tmp_path / "b")
    names = sorted(p.name for p in a.directory.iterdir())
    assert names == sorted(p.name for p in b.directory.iterdir())
    for name in names:
        assert (a.directory / name).read_bytes() == (b.directory / name).read_bytes()


def test_drift_within_three_standard_errors():
    spec = SyntheticSpec(n_assets=300, n_periods=8, rng_seed=2)
    closes = simulate(spec).closes.to_numpy()
    daily = (closes[1:] / closes[:-1] - 1).mean(axis=1)
    se = daily.std(ddof=1) / math.sqrt(len(daily))
    assert abs(daily.mean() - spec.drift) < 3 * se


def rank_ics(market):
    closes = market.closes
    out = []
    for d, cands in market.scores.items():
        pos = closes.index.get_loc(pd.Timestamp(d))
        ids = [c.asset_id for c in cands]
        fwd = closes[ids].iloc[pos + FORWARD_OBS].to_numpy() / closes[ids].iloc[pos].to_numpy() - 1
        out.append(spearmanr([c.score for c in cands], fwd)[0])
    return np.array(out)


@pytest.fixture(scope="module")
def ic_by_setting():
    return {ic: rank_ics(simulate(SyntheticSpec(n_assets=400, n_periods=20, rng_seed=4,
                                                information_coefficient=ic)))
            for ic in (0.0, 0.05, 0.2)}


def test_null_signal(ic_by_setting):
    ics = ic_by_setting[0.0]
    se = 1 / math.sqrt(400 - 1) / math.sqrt(len(ics))
    assert abs(ics.mean()) < 3 * se


def test_information_coefficient_monotone(ic_by_setting):
    means = [ic_by_setting[ic].mean() for ic in (0.0, 0.05, 0.2)]
    assert means[0] < means[1] < means[2]
    assert means[2] == pytest.approx(0.2, abs=0.03)


def test_scores_in_range_and_autocorrelated():
    market = simulate(SyntheticSpec(n_assets=300, n_periods=6, rng_seed=1))
    frames = [np.array([c.score for c in cands]) for cands in market.scores.values()]
    assert all(((f >= 0) & (f <= 100)).all() for f in frames)
    lagged = np.mean([spearmanr(a, b)[0] for a, b in zip(frames, frames[1:])])
    assert 0.65 < lagged < 0.9


def test_round_trip_through_data_io(tmp_path, caplog):
    spec = SyntheticSpec(n_assets=120, n_periods=3, rng_seed=3)
    market = simulate(spec)
    files = generate_universe(spec, tmp_path)
    prices = load_prices(files.prices)
    with caplog.at_level(logging.WARNING):
        for d, path in zip(files.dates, files.score_files):
            assert read_scores(path) == market.scores[d]
            snap = load_universe(path, prices, d)
            assert len(snap) == 120 and not snap.excluded
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]
    # prices are stored to six decimals
    assert np.allclose(prices.closes.to_numpy(), market.closes.to_numpy(), rtol=0, atol=5e-7)


def test_churned_universe():
    spec = SyntheticSpec(n_assets=200, n_periods=4, rng_seed=1, n_active=100, churn=0.5)
    sets = [{c.asset_id for c in cands} for cands in simulate(spec).scores.values()]
    assert all(len(s) == 100 for s in sets)
    assert all(len(a - b) == 50 for a, b in zip(sets, sets[1:]))


@pytest.mark.parametrize("kw", [dict(n_days=100), dict(information_coefficient=1.0),
                                dict(churn=2.0), dict(n_active=0), dict(n_assets=0)])
def test_invalid_spec(kw):
    with pytest.raises(InvalidArgumentError):
        simulate(SyntheticSpec(**kw))


# benchmark

def write_market(tmp_path, closes, caps_by_date):
    write_prices(tmp_path / "prices.csv", closes)
    # oracles below work from the stored (rounded) prices
    closes.loc[:, :] = load_prices(tmp_path / "prices.csv").closes[closes.columns].to_numpy()
    paths = []
    for d, caps in caps_by_date.items():
        p = tmp_path / f"scores_{d.date().isoformat()}.csv"
        write_scores(p, [Candidate(a, 50.0, c, 0.5) for a, c in caps.items()])
        paths.append(p)
    return tmp_path / "prices.csv", paths


def random_closes(n_assets, n_days, seed):
    rng = np.random.default_rng(seed)
    cal = pd.bdate_range("2012-01-02", periods=n_days)
    rets = rng.normal(0.0004, 0.02, size=(n_days, n_assets))
    closes = pd.DataFrame(30 * np.cumprod(1 + rets, axis=0), index=cal,
                          columns=[f"B{i:02d}" for i in range(n_assets)])
    closes.index.name = "date"
    return closes


def test_benchmark_single_asset(tmp_path):
    closes = random_closes(1, 200, 0)
    dates = closes.index[[0, 63, 126]]
    price_path, paths = write_market(tmp_path, closes, {d: {"B00": 1e9} for d in dates})
    periods, daily = cap_weighted_benchmark(price_path, paths)
    s = closes["B00"]
    assert np.allclose(daily.to_numpy(), s.pct_change().iloc[1:190].to_numpy(), rtol=0, atol=1e-12)
    assert periods.iloc[1] == pytest.approx(s.iloc[126] / s.iloc[63] - 1, abs=1e-12)


def test_benchmark_two_equal_caps(tmp_path):
    closes = random_closes(2, 140, 1)
    dates = closes.index[[0, 63]]
    price_path, paths = write_market(tmp_path, closes, {d: {"B00": 2e9, "B01": 2e9} for d in dates})
    periods, _ = cap_weighted_benchmark(price_path, tmp_path)
    for k, d in enumerate(dates):
        pos = closes.index.get_loc(d)
        rel = closes.iloc[pos + 63] / closes.iloc[pos]
        assert periods.iloc[k] == pytest.approx(0.5 * rel.iloc[0] + 0.5 * rel.iloc[1] - 1, abs=1e-12)


def test_benchmark_ten_asset_loop_oracle(tmp_path):
    closes = random_closes(10, 260, 2)
    rng = np.random.default_rng(2)
    dates = closes.index[[0, 63, 126]]
    caps = {d: {a: float(c) for a, c in zip(closes.columns, rng.lognormal(22, 1, 10))} for d in dates}
    price_path, paths = write_market(tmp_path, closes, caps)
    periods, daily = cap_weighted_benchmark(price_path, paths)
    expected_daily = []
    for d in dates:
        pos = closes.index.get_loc(d)
        total = sum(caps[d].values())
        value_prev = 1.0
        for t in range(1, 64):
            value = 0.0
            for a, c in caps[d].items():
                value += c / total * closes[a].iloc[pos + t] / closes[a].iloc[pos]
            expected_daily.append(value / value_prev - 1)
            value_prev = value
        assert periods[d.date()] == pytest.approx(value_prev - 1, abs=1e-12)
    assert np.allclose(daily.to_numpy(), expected_daily, rtol=0, atol=1e-12)
