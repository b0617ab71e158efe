"""Stock selection: NSGA-II over 0/1 inclusion strings.

Objectives (all minimized): negated score sum, negated mean market cap and,
for the growth mandate, mean book-to-price.  Constraint violations are
turned into a relative violation ``v`` and ``10 * range_i * v`` is added to
every objective ``i``, where ``range_i`` is a fixed spread of objective ``i``
over the universe.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import ConstraintSet, cardinality_bounds
from .data_io import UniverseSnapshot, universe_targets
from .engine import EaParams, crowding_distance, run_nsga2
from .errors import InvalidArgumentError, Phase1InfeasibleError

log = logging.getLogger(__name__)

LARGE_CAP = "large-cap"
LARGE_CAP_GROWTH = "large-cap-growth"
MANDATES = (LARGE_CAP, LARGE_CAP_GROWTH)

INITIAL_POPCOUNT = 156
MAX_PORTFOLIOS = 50
PENALTY_SCALE = 10.0

PHASE1_PRESETS = {
    LARGE_CAP: EaParams(population_size=500, generations=1200, mutation_rate=0.03),
    LARGE_CAP_GROWTH: EaParams(population_size=50, generations=1200, mutation_rate=0.03),
}


def normalize_mandate(mandate: str) -> str:
    m = mandate.strip().lower().replace("_", "-")
    if m not in MANDATES:
        raise InvalidArgumentError(f"unknown mandate {mandate!r}; expected one of {MANDATES}")
    return m


class SelectionProblem:
    encoding = "binary"
    bounds = None

    def __init__(self, universe: UniverseSnapshot, mandate: str = LARGE_CAP,
                 cardinality: tuple[int, int] | None = None, targets: tuple[float, float] | None = None,
                 prior_portfolios: Sequence = (), initial_popcount: int = INITIAL_POPCOUNT,
                 penalty_scale: float = PENALTY_SCALE):
        self.universe = universe
        self.mandate = normalize_mandate(mandate)
        self.asset_ids = universe.asset_ids
        self.cardinality = cardinality or cardinality_bounds(0.0035, 0.04)
        self.targets = targets or universe_targets(universe)
        self.initial_popcount = initial_popcount
        self.penalty_scale = penalty_scale
        self.scores = np.array([c.score for c in universe.candidates])
        self.caps = np.array([c.market_cap for c in universe.candidates])
        self.b2p = np.array([c.book_to_price for c in universe.candidates])
        self.n_var = len(self.asset_ids)
        self.n_obj = 3 if self.mandate == LARGE_CAP_GROWTH else 2
        self.prior_portfolios = [self.reindex(p) for p in prior_portfolios]
        self.ranges = np.array([
            max(np.clip(self.scores, 0, None).sum(), 1.0),
            max(self.caps.max() - self.caps.min(), 1.0),
            max(self.b2p.max() - self.b2p.min(), 1e-6),
        ])[: self.n_obj]
        # no penalized genome can do better than this on any objective
        self.worst = np.array([np.abs(self.scores).sum(), 0.0, self.b2p.max()])[: self.n_obj]

    @property
    def growth(self) -> bool:
        return self.mandate == LARGE_CAP_GROWTH

    def reindex(self, prior) -> np.ndarray:
        """Map a prior portfolio (asset ids or a mapping) onto this universe."""
        ids = set(prior.keys() if hasattr(prior, "keys") else prior)
        return np.array([a in ids for a in self.asset_ids], dtype=bool)

    def random_genomes(self, count: int, rng) -> np.ndarray:
        k = min(self.initial_popcount, self.n_var, self.cardinality[1])
        picks = np.argsort(rng.random((count, self.n_var)), axis=1)[:, :k]
        G = np.zeros((count, self.n_var), dtype=bool)
        np.put_along_axis(G, picks, True, axis=1)
        return G

    def raw_objectives(self, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Objective values without penalties, plus popcounts."""
        G = np.atleast_2d(np.asarray(G, dtype=bool))
        X = G.astype(float)
        n = X.sum(axis=1)
        safe = np.where(n > 0, n, 1.0)
        cols = [-(X @ self.scores), -(X @ self.caps) / safe]
        if self.growth:
            cols.append((X @ self.b2p) / safe)
        return np.column_stack(cols), n

    def violations(self, G: np.ndarray) -> np.ndarray:
        G = np.atleast_2d(np.asarray(G, dtype=bool))
        F, n = self.raw_objectives(G)
        min_n, max_n = self.cardinality
        v = np.clip(min_n - n, 0, None) / min_n + np.clip(n - max_n, 0, None) / max_n
        cap_target = self.targets[0]
        v = v + np.clip(cap_target + F[:, 1], 0, None) / cap_target
        if self.growth:
            ceiling = self.targets[1]
            v = v + np.clip(F[:, 2] - ceiling, 0, None) / ceiling
        return np.where(n > 0, v, np.inf)

    def evaluate(self, G: np.ndarray) -> np.ndarray:
        F, n = self.raw_objectives(G)
        v = self.violations(G)
        empty = n == 0
        v_finite = np.where(empty, 0.0, v)
        F = F + self.penalty_scale * self.ranges[None, :] * v_finite[:, None]
        if empty.any():
            F[empty] = self.worst + self.penalty_scale * self.ranges * (self.n_obj + 2)
        return F


def evaluate_selection(genome, problem: SelectionProblem) -> np.ndarray:
    genome = np.asarray(genome, dtype=bool)
    if genome.shape != (problem.n_var,):
        raise InvalidArgumentError(f"genome length {genome.shape} != universe size {problem.n_var}")
    return problem.evaluate(genome[None, :])[0]


def seed_generation_zero(problem: SelectionProblem, population_size: int, rng) -> np.ndarray:
    priors = problem.prior_portfolios
    if population_size < len(priors):
        raise InvalidArgumentError("population smaller than the number of prior portfolios")
    parts = [np.asarray(priors, dtype=bool).reshape(len(priors), problem.n_var)]
    parts.append(problem.random_genomes(population_size - len(priors), rng))
    return np.concatenate(parts)


@dataclass
class CandidatePortfolioSet:
    asset_ids: list[str]
    genomes: np.ndarray
    objectives: np.ndarray
    as_of: date | None = None
    from_prior: list[bool] = field(default_factory=list)

    def __len__(self):
        return len(self.genomes)

    def members(self, i: int) -> list[str]:
        return [a for a, bit in zip(self.asset_ids, self.genomes[i]) if bit]

    def portfolios(self) -> list[list[str]]:
        return [self.members(i) for i in range(len(self))]


def _truncate_by_crowding(F: np.ndarray, limit: int) -> np.ndarray:
    if len(F) <= limit:
        return np.arange(len(F))
    cd = crowding_distance(F)
    keep = np.argsort(-cd, kind="stable")[:limit]
    return np.sort(keep)


def run_phase1(problem: SelectionProblem, params: EaParams | None = None,
               max_portfolios: int = MAX_PORTFOLIOS, trace_path=None) -> CandidatePortfolioSet:
    params = params or PHASE1_PRESETS[problem.mandate]
    priors = problem.prior_portfolios
    if len(priors) > params.population_size:
        # oldest-first order; keep the first slots
        priors = priors[: params.population_size]
    front = run_nsga2(problem, params, seeds=priors, trace_path=trace_path)
    G = np.array([ind.genome for ind in front], dtype=bool).reshape(len(front), problem.n_var)
    F = np.array([ind.objectives for ind in front]).reshape(len(front), problem.n_obj)
    feasible = problem.violations(G) == 0
    G, F = G[feasible], F[feasible]
    if len(G):
        _, first = np.unique(G, axis=0, return_index=True)
        first = np.sort(first)
        G, F = G[first], F[first]
        keep = _truncate_by_crowding(F, max_portfolios)
        G, F = G[keep], F[keep]
    from_prior = [False] * len(G)
    extra_G, extra_F = [], []
    seen = {g.tobytes() for g in G}
    for p in problem.prior_portfolios:
        if problem.violations(p[None, :])[0] == 0 and p.tobytes() not in seen:
            seen.add(p.tobytes())
            extra_G.append(p)
            extra_F.append(problem.evaluate(p[None, :])[0])
    if extra_G:
        G = np.concatenate([G, np.array(extra_G)]) if len(G) else np.array(extra_G)
        F = np.concatenate([F, np.array(extra_F)]) if len(F) else np.array(extra_F)
        from_prior += [True] * len(extra_G)
    if len(G) == 0:
        allG = np.array([ind.genome for ind in front], dtype=bool)
        v = problem.violations(allG)
        best = int(np.argmin(v))
        raw, n = problem.raw_objectives(allG[best:best + 1])
        raise Phase1InfeasibleError(
            f"no feasible selection at {problem.universe.as_of}",
            {"best_violation": float(v[best]), "popcount": int(n[0]),
             "objectives": raw[0].tolist(), "cardinality": list(problem.cardinality),
             "targets": list(problem.targets)},
        )
    log.info("phase 1 at %s: %d candidate portfolios", problem.universe.as_of, len(G))
    return CandidatePortfolioSet(list(problem.asset_ids), G, F, problem.universe.as_of, from_prior)


def objective_names(n_obj: int) -> list[str]:
    names = ["neg_score_sum", "neg_mean_market_cap", "mean_book_to_price"]
    return names[:n_obj]


def write_phase1_outputs(result: CandidatePortfolioSet, objectives_path, portfolios_path) -> None:
    if len(result) == 0:
        raise InvalidArgumentError("refusing to write an empty candidate set")
    n_obj = result.objectives.shape[1]
    with Path(objectives_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["portfolio"] + objective_names(n_obj))
        for i, row in enumerate(result.objectives):
            w.writerow([i] + [repr(float(v)) for v in row])
    with Path(portfolios_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.asset_ids)
        for g in result.genomes:
            w.writerow([int(b) for b in g])


def read_phase1_outputs(objectives_path, portfolios_path, as_of=None) -> CandidatePortfolioSet:
    with Path(portfolios_path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    asset_ids, bits = rows[0], rows[1:]
    G = np.array([[int(b) for b in r] for r in bits if r], dtype=bool).reshape(-1, len(asset_ids))
    with Path(objectives_path).open(newline="", encoding="utf-8") as fh:
        orows = list(csv.reader(fh))[1:]
    F = np.array([[float(v) for v in r[1:]] for r in orows if r])
    if len(F) != len(G):
        raise InvalidArgumentError("objective and portfolio files disagree on row count")
    return CandidatePortfolioSet(asset_ids, G, F.reshape(len(G), -1), as_of, [False] * len(G))


def problem_for(universe: UniverseSnapshot, mandate: str, constraints: ConstraintSet,
                prior_portfolios: Sequence = (), initial_popcount: int = INITIAL_POPCOUNT) -> SelectionProblem:
    targets = universe_targets(universe)
    return SelectionProblem(universe, mandate, constraints.cardinality, targets, prior_portfolios,
                            initial_popcount)


def with_seed(params: EaParams, seed: int) -> EaParams:
    return replace(params, rng_seed=seed)
