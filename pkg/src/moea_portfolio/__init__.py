"""Two-phase multiobjective evolutionary portfolio construction.

Phase I picks stock subsets with NSGA-II, Phase II weights each subset with
SPEA2, and a quarterly backtester chains the two over a market data set.
"""

__version__ = "0.1.0"

from .backtest import BacktestConfig, BacktestReport, run_backtest, write_report
from .domain import Candidate, ConstraintSet, Portfolio, check_constraints
from .engine import EaParams, ParetoArchive, run_nsga2, run_spea2
from .phase1 import SelectionProblem, run_phase1
from .phase2 import WeightingProblem, run_phase2
from .synthetic import SyntheticSpec, generate_universe

__all__ = [
    "BacktestConfig", "BacktestReport", "run_backtest", "write_report",
    "Candidate", "ConstraintSet", "Portfolio", "check_constraints",
    "EaParams", "ParetoArchive", "run_nsga2", "run_spea2",
    "SelectionProblem", "run_phase1", "WeightingProblem", "run_phase2",
    "SyntheticSpec", "generate_universe",
]
