"""TOML run configuration.

Recognized tables and keys (every key optional)::

    [data]        dir, prices, risk_free
    [backtest]    mandate, seed, dates, max_periods, transaction_cost_bps,
                  weighting_strategy, max_phase1_portfolios,
                  max_phase2_candidates, initial_popcount, threads, out, trace
    [constraints] min_weight, max_weight, monthly_turnover_cap,
                  rebalance_months, turnover_convention
    [filter]      score_floor, cap_fraction, cap_floor
    [phase1] [phase2] [phase2a]
                  population_size, generations, mutation_rate, sbx_eta,
                  pm_eta, crossover_rate
    [synthetic]   any SyntheticSpec field

Unknown tables or keys are logged and ignored.  Relative paths resolve
against the config file's directory.
"""

from __future__ import annotations

import logging
from dataclasses import fields, replace
from datetime import date
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backtest import BacktestConfig
from .domain import ConstraintSet
from .engine import EaParams
from .errors import DataError, InvalidArgumentError
from .phase1 import PHASE1_PRESETS, normalize_mandate
from .phase2 import PHASE2_PARAMS, PHASE2A_PARAMS
from .synthetic import SyntheticSpec

log = logging.getLogger(__name__)

EA_KEYS = {"population_size", "generations", "mutation_rate", "sbx_eta", "pm_eta", "crossover_rate"}
BACKTEST_KEYS = {"mandate", "seed", "dates", "max_periods", "transaction_cost_bps", "weighting_strategy",
                 "max_phase1_portfolios", "max_phase2_candidates", "initial_popcount", "threads", "out",
                 "trace"}
CONSTRAINT_KEYS = {"min_weight", "max_weight", "monthly_turnover_cap", "rebalance_months", "turnover_convention"}
FILTER_KEYS = {"score_floor", "cap_fraction", "cap_floor"}
DATA_KEYS = {"dir", "prices", "risk_free"}
SYNTHETIC_KEYS = {f.name for f in fields(SyntheticSpec)}
TABLES = {
    "data": DATA_KEYS, "backtest": BACKTEST_KEYS, "constraints": CONSTRAINT_KEYS, "filter": FILTER_KEYS,
    "phase1": EA_KEYS, "phase2": EA_KEYS, "phase2a": EA_KEYS, "synthetic": SYNTHETIC_KEYS,
}


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    for table, value in raw.items():
        if table not in TABLES or not isinstance(value, dict):
            log.warning("%s: ignoring unknown entry [%s]", path, table)
            continue
        for key in value:
            if key not in TABLES[table]:
                log.warning("%s: ignoring unknown key %s.%s", path, table, key)
    raw["_base"] = str(path.parent)
    return raw


def _section(raw: dict, name: str) -> dict:
    allowed = TABLES[name]
    return {k: v for k, v in raw.get(name, {}).items() if k in allowed}


def resolve_path(raw: dict, value):
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute() and raw.get("_base"):
        p = Path(raw["_base"]) / p
    return p


def _ea(base: EaParams, table: dict) -> EaParams:
    try:
        return replace(base, **table)
    except TypeError as exc:
        raise InvalidArgumentError(str(exc)) from None


def backtest_config(raw: dict, seed: int | None = None, mandate: str | None = None,
                    data_dir=None, threads: int | None = None, trace=None) -> BacktestConfig:
    data = _section(raw, "data")
    bt = _section(raw, "backtest")
    mandate = normalize_mandate(mandate or bt.get("mandate", "large-cap"))
    directory = data_dir or resolve_path(raw, data.get("dir")) or Path(".")
    constraints = ConstraintSet(**_section(raw, "constraints"))
    flt = _section(raw, "filter")
    dates = bt.get("dates")
    if dates is not None:
        dates = [d if isinstance(d, date) else date.fromisoformat(str(d)) for d in dates]
    return BacktestConfig(
        data_dir=Path(directory),
        price_path=resolve_path(raw, data.get("prices")),
        risk_free_path=resolve_path(raw, data.get("risk_free")),
        rebalance_dates=dates,
        max_periods=bt.get("max_periods"),
        mandate=mandate,
        constraints=constraints,
        phase1=_ea(PHASE1_PRESETS[mandate], _section(raw, "phase1")),
        phase2=_ea(PHASE2_PARAMS, _section(raw, "phase2")),
        phase2a=_ea(PHASE2A_PARAMS, _section(raw, "phase2a")),
        weighting_strategy=bt.get("weighting_strategy", 1),
        transaction_cost_bps=bt.get("transaction_cost_bps", 10.0),
        rng_seed=seed if seed is not None else bt.get("seed", 0),
        max_phase1_portfolios=bt.get("max_phase1_portfolios", 50),
        max_phase2_candidates=bt.get("max_phase2_candidates"),
        initial_popcount=bt.get("initial_popcount", 156),
        score_floor=flt.get("score_floor", 20.0),
        cap_fraction=flt.get("cap_fraction", 0.12),
        cap_floor=flt.get("cap_floor", 750e6),
        threads=threads if threads is not None else bt.get("threads", 1),
        trace_path=trace if trace is not None else resolve_path(raw, bt.get("trace")),
    )


def synthetic_spec(raw: dict, seed: int | None = None) -> SyntheticSpec:
    table = _section(raw, "synthetic")
    if seed is not None:
        table["rng_seed"] = seed
    return SyntheticSpec(**table)


def default_config_text() -> str:
    """Every default as a TOML document (what ``--print-config`` shows)."""
    c = ConstraintSet()
    lines = [
        "[data]", 'dir = "data"', "",
        "[backtest]", 'mandate = "large-cap"', "seed = 0", "transaction_cost_bps = 10.0",
        "weighting_strategy = 1", "max_phase1_portfolios = 50", "initial_popcount = 156", "threads = 1",
        'out = "results/run"', "",
        "[constraints]", f"min_weight = {c.min_weight}", f"max_weight = {c.max_weight}",
        f"monthly_turnover_cap = {c.monthly_turnover_cap}", f"rebalance_months = {c.rebalance_months}",
        f'turnover_convention = "{c.turnover_convention}"', "",
        "[filter]", "score_floor = 20.0", "cap_fraction = 0.12", "cap_floor = 750000000.0", "",
    ]
    for name, p in (("phase1", PHASE1_PRESETS["large-cap"]), ("phase2", PHASE2_PARAMS), ("phase2a", PHASE2A_PARAMS)):
        lines += [f"[{name}]", f"population_size = {p.population_size}", f"generations = {p.generations}",
                  f"mutation_rate = {p.mutation_rate}", f"sbx_eta = {p.sbx_eta}", f"pm_eta = {p.pm_eta}",
                  f"crossover_rate = {p.crossover_rate}", ""]
    s = SyntheticSpec()
    lines.append("[synthetic]")
    for f in fields(SyntheticSpec):
        v = getattr(s, f.name)
        if v is None:
            continue
        lines.append(f'{f.name} = "{v}"' if isinstance(v, str) else f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"
