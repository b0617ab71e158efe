import json
import logging

import numpy as np
import pandas as pd
import pytest

from moea_portfolio import __version__
from moea_portfolio.backtest import phase1_for_date, phase2_for_date, run_backtest, write_report
from moea_portfolio.cli import main, read_holdings
from moea_portfolio.config import backtest_config, default_config_text, read_config, synthetic_spec
from moea_portfolio.errors import DataError
from moea_portfolio.phase1 import read_phase1_outputs

CONFIG = """
[data]
dir = "data"

[synthetic]
n_assets = 200
n_periods = 3
rng_seed = 21

[backtest]
seed = 4
max_phase2_candidates = 2
out = "results/run"

[phase1]
population_size = 30
generations = 20

[phase2]
population_size = 20
generations = 10

[phase2a]
population_size = 10
generations = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(CONFIG)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    return root, cfg


def dates_of(root):
    return sorted(p.stem.split("_", 1)[1] for p in (root / "data").glob("scores_*.csv"))


def test_gen_data_writes_relative_to_config(workspace):
    root, _ = workspace
    assert (root / "data" / "prices.csv").exists()
    assert len(dates_of(root)) == 3


def test_backtest_twice_identical(workspace, capsys):
    root, cfg = workspace
    for name in ("a", "b"):
        assert main(["backtest", "--config", str(cfg), "--seed", "7", "--max-periods", "2",
                     "--out", str(root / name / "run")]) == 0
    out = capsys.readouterr().out
    assert "cumulative value" in out
    for suffix in ("_periods.csv", "_summary.json"):
        assert (root / "a" / f"run{suffix}").read_bytes() == (root / "b" / f"run{suffix}").read_bytes()


def test_cli_matches_library(workspace):
    root, cfg = workspace
    assert main(["backtest", "--config", str(cfg), "--seed", "7", "--max-periods", "2",
                 "--out", str(root / "cli" / "run")]) == 0
    config = backtest_config(read_config(cfg), seed=7)
    config.max_periods = 2
    paths = write_report(run_backtest(config), root / "lib" / "run")
    assert paths["periods"].read_bytes() == (root / "cli" / "run_periods.csv").read_bytes()
    assert paths["summary"].read_bytes() == (root / "cli" / "run_summary.json").read_bytes()


def test_default_out_from_config(workspace):
    root, cfg = workspace
    assert main(["backtest", "--config", str(cfg), "--max-periods", "2"]) == 0
    assert (root / "results" / "run_periods.csv").exists()


def test_phase1_then_phase2(workspace, capsys):
    root, cfg = workspace
    d = dates_of(root)[0]
    prefix = root / "p1" / "cand"
    assert main(["phase1", "--config", str(cfg), "--date", d, "--out", str(prefix)]) == 0
    obj = root / "p1" / "cand_objectives.csv"
    port = root / "p1" / "cand_portfolios.csv"
    cps = read_phase1_outputs(obj, port)
    assert len(cps) >= 1
    assert pd.read_csv(obj).shape[0] == len(cps)

    config = backtest_config(read_config(cfg))
    lib = phase1_for_date(config, pd.Timestamp(d).date())
    assert np.array_equal(lib.genomes, cps.genomes)

    out = root / "p2" / "win"
    assert main(["phase2", "--config", str(cfg), "--date", d, "--phase1", str(prefix), "--out", str(out)]) == 0
    winner = read_holdings(root / "p2" / "win_winner.csv")
    assert abs(winner.total_weight() - 1) < 1e-9
    diag = json.loads((root / "p2" / "win_diagnostics.json").read_text())
    assert diag["winner"] in [c["index"] for c in diag["candidates"]]
    lib_winner, _ = phase2_for_date(config, pd.Timestamp(d).date(), cps)
    assert lib_winner.portfolio.holdings == pytest.approx(winner.holdings, abs=0)

    # the winner can seed the next period through --prior and --previous
    d2 = dates_of(root)[1]
    assert main(["phase1", "--config", str(cfg), "--date", d2, "--out", str(root / "p1" / "next"),
                 "--prior", str(root / "p2" / "win_winner.csv")]) == 0
    assert main(["phase2", "--config", str(cfg), "--date", d2, "--phase1", str(root / "p1" / "next"),
                 "--previous", str(root / "p2" / "win_winner.csv"), "--out", str(root / "p2" / "next")]) == 0


def test_report_subcommand(workspace, capsys, tmp_path):
    root, cfg = workspace
    assert main(["backtest", "--config", str(cfg), "--out", str(root / "rep" / "run")]) == 0
    capsys.readouterr()
    out_json = tmp_path / "agg.json"
    assert main(["report", str(root / "rep" / "run_periods.csv"), "--out", str(out_json)]) == 0
    text = capsys.readouterr().out
    assert "information ratio" in text and "Sharpe ratio" in text
    summary = json.loads((root / "rep" / "run_summary.json").read_text())
    agg = json.loads(out_json.read_text())
    assert agg["portfolio"]["cumulative_value"] == pytest.approx(summary["portfolio"]["cumulative_value"])


def test_missing_config_exits_2(tmp_path, capsys):
    path = tmp_path / "absent.toml"
    assert main(["backtest", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_missing_data_exits_2(tmp_path):
    assert main(["backtest", "--data", str(tmp_path / "nothing")]) == 2


def test_unknown_flag_exits_1(capsys):
    assert main(["backtest", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_no_subcommand_exits_1():
    assert main([]) == 1
    assert main(["explode"]) == 1


def test_infeasible_exits_3(workspace, tmp_path):
    root, cfg = workspace
    tight = tmp_path / "tight.toml"
    tight.write_text(CONFIG.replace('dir = "data"', f'dir = "{root / "data"}"')
                     + "\n[filter]\nscore_floor = 99.5\ncap_fraction = 0.0\n")
    d = dates_of(root)[0]
    assert main(["phase1", "--config", str(tight), "--date", d, "--out", str(tmp_path / "x")]) == 3


def test_print_config_and_version(capsys):
    assert main(["--print-config"]) == 0
    text = capsys.readouterr().out
    assert text == default_config_text()
    assert "[phase2]" in text and "generations = 600" in text
    with pytest.raises(SystemExit) as exit_info:
        main(["--version"])
    assert exit_info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_printed_config_round_trips(tmp_path):
    path = tmp_path / "defaults.toml"
    path.write_text(default_config_text())
    raw = read_config(path)
    cfg = backtest_config(raw)
    assert cfg.phase2.generations == 600 and cfg.phase2.population_size == 100
    assert cfg.constraints.turnover_budget == pytest.approx(0.24)
    assert synthetic_spec(raw).n_assets == 400


def test_unknown_keys_warn(tmp_path, caplog):
    path = tmp_path / "c.toml"
    path.write_text("[backtest]\nseed = 3\nfuture_knob = 1\n[shiny]\nx = 2\n")
    with caplog.at_level(logging.WARNING):
        raw = read_config(path)
    assert "future_knob" in caplog.text and "shiny" in caplog.text
    assert backtest_config(raw).rng_seed == 3


def test_bad_toml_is_data_error(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[backtest\n")
    with pytest.raises(DataError):
        read_config(path)
