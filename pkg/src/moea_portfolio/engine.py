"""Multiobjective evolutionary machinery shared by both portfolio phases.

Everything here minimizes.  Problems negate maximization objectives before
handing them to the engine.

A problem is any object exposing::

    n_var: int                  genome length
    n_obj: int                  objective count
    encoding: str               "binary" or "real"
    bounds: (low, high)         gene bounds, real encoding only
    random_genomes(count, rng) -> ndarray (count, n_var)
    evaluate(genomes) -> ndarray (count, n_obj), finite values

and optionally ``repair(genomes) -> genomes`` which is applied before every
evaluation (the repaired genome replaces the original).

RNG stream order: ``SeedSequence(rng_seed).spawn(generations + 1)`` gives one
child per generation plus one for initialization (index 0).  Inside a
generation the child is split again into (selection, crossover, mutation)
streams, in that order.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError

SENTINEL = sys.float_info.max


@dataclass
class EaParams:
    population_size: int = 100
    generations: int = 100
    mutation_rate: float = 0.01
    archive_size: int | None = None
    rng_seed: int = 0
    sbx_eta: float = 15.0
    pm_eta: float = 20.0
    crossover_rate: float = 1.0

    def __post_init__(self):
        if self.population_size < 2:
            raise InvalidArgumentError("population_size must be >= 2")
        if self.generations < 1:
            raise InvalidArgumentError("generations must be >= 1")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise InvalidArgumentError("mutation_rate must lie in [0, 1]")
        if self.archive_size is not None and self.archive_size < 1:
            raise InvalidArgumentError("archive_size must be positive")

    @property
    def effective_archive_size(self) -> int:
        return self.archive_size if self.archive_size is not None else self.population_size


@dataclass(eq=False)
class Individual:
    genome: np.ndarray
    objectives: np.ndarray | None = None
    fitness: float = math.nan
    rank: int = -1
    crowding: float = 0.0

    @property
    def evaluated(self) -> bool:
        return self.objectives is not None


def _objective_matrix(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        F = items
    else:
        items = list(items)
        if not items:
            return np.empty((0, 0))
        if isinstance(items[0], Individual):
            F = [ind.objectives for ind in items]
        else:
            F = items
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    return F


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"objective length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def dominance_matrix(F: np.ndarray) -> np.ndarray:
    """``D[i, j]`` is True when row i dominates row j."""
    F = np.asarray(F, dtype=float)
    le = (F[:, None, :] <= F[None, :, :]).all(axis=2)
    lt = (F[:, None, :] < F[None, :, :]).any(axis=2)
    return le & lt


def fast_nondominated_sort(population) -> list[list[int]]:
    """Partition into fronts of indices; front 0 is the non-dominated set.

    Accepts a list of evaluated ``Individual`` or a 2-D array of objectives.
    Indices inside each front are ascending.
    """
    F = _objective_matrix(population)
    n = len(F)
    if n == 0:
        return []
    D = dominance_matrix(F)
    dominated_by = D.sum(axis=0)
    fronts = []
    current = np.flatnonzero(dominated_by == 0)
    while current.size:
        fronts.append(current.tolist())
        dominated_by = dominated_by - D[current].sum(axis=0)
        dominated_by[current] = -1
        current = np.flatnonzero(dominated_by == 0)
    return fronts


def nondominated_mask(F: np.ndarray) -> np.ndarray:
    F = _objective_matrix(F)
    if len(F) == 0:
        return np.zeros(0, dtype=bool)
    return ~dominance_matrix(F).any(axis=0)


def crowding_distance(front) -> np.ndarray:
    """Crowding distance per member, in input order.

    Boundary members of every objective get ``SENTINEL`` (largest finite
    float) rather than infinity.
    """
    F = _objective_matrix(front)
    n = len(F)
    if n == 0:
        raise InvalidArgumentError("crowding_distance of an empty front")
    dist = np.zeros(n)
    boundary = np.zeros(n, dtype=bool)
    if n <= 2:
        return np.full(n, SENTINEL)
    for m in range(F.shape[1]):
        order = np.argsort(F[:, m], kind="stable")
        col = F[order, m]
        boundary[order[0]] = True
        boundary[order[-1]] = True
        span = col[-1] - col[0]
        if span <= 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    dist[boundary] = SENTINEL
    return dist


def rank_and_crowding(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(F)
    rank = np.empty(n, dtype=int)
    crowd = np.empty(n)
    for r, front in enumerate(fast_nondominated_sort(F)):
        rank[front] = r
        crowd[front] = crowding_distance(F[front])
    return rank, crowd


# --------------------------------------------------------------------------
# Pareto archive


class ParetoArchive:
    """Mutually non-dominated set maintained with the classic insertion rules.

    With a finite ``capacity`` an insertion that overflows drops the member
    with the smallest crowding distance (lowest index on ties).
    """

    def __init__(self, capacity: int | None = None, members: Iterable[Individual] = ()):
        if capacity is not None and capacity < 1:
            raise InvalidArgumentError("archive capacity must be positive")
        self.capacity = capacity
        self.members: list[Individual] = []
        for m in members:
            self.insert(m)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def objectives(self) -> np.ndarray:
        return _objective_matrix(self.members)

    def insert(self, candidate: Individual) -> bool:
        """Apply the archiving rules; return True when the candidate was kept."""
        if candidate.objectives is None:
            raise InvalidArgumentError("cannot archive an unevaluated individual")
        f = np.asarray(candidate.objectives, dtype=float)
        if self.members:
            F = self.objectives()
            if F.shape[1] != f.shape[0]:
                raise InvalidArgumentError("objective length mismatch")
            le = (F <= f).all(axis=1)
            if (le & (F < f).any(axis=1)).any() or (F == f).all(axis=1).any():
                return False
            evicted = (f <= F).all(axis=1) & (f < F).any(axis=1)
            if evicted.any():
                self.members = [m for m, e in zip(self.members, evicted) if not e]
        self.members.append(candidate)
        if self.capacity is not None and len(self.members) > self.capacity:
            crowd = crowding_distance(self.objectives())
            del self.members[int(np.argmin(crowd))]
        return candidate in self.members


def archive_insert(archive: ParetoArchive, candidate: Individual) -> ParetoArchive:
    archive.insert(candidate)
    return archive


# --------------------------------------------------------------------------
# Selection and variation


def binary_tournament(population: Sequence, fitness_key: Callable, rng):
    """Two uniform draws with replacement; the lower key wins, first draw on ties."""
    if not population:
        raise InvalidArgumentError("tournament on an empty population")
    n = len(population)
    i, j = (int(v) for v in rng.integers(0, n, size=2))
    a, b = population[i], population[j]
    return a if fitness_key(a) <= fitness_key(b) else b


def _tournament_indices(keys: np.ndarray, count: int, rng) -> np.ndarray:
    """Vectorized binary tournaments; ``keys`` is (n, k), compared lexicographically."""
    n = len(keys)
    draws = rng.integers(0, n, size=(count, 2))
    a, b = draws[:, 0], draws[:, 1]
    ka, kb = keys[a], keys[b]
    pick_b = np.zeros(count, dtype=bool)
    undecided = np.ones(count, dtype=bool)
    for c in range(keys.shape[1]):
        lt = kb[:, c] < ka[:, c]
        gt = kb[:, c] > ka[:, c]
        pick_b |= undecided & lt
        undecided &= ~(lt | gt)
    return np.where(pick_b, b, a)


def single_point_crossover(a, b, rng, cut: int | None = None):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError("parents differ in length")
    length = a.shape[0]
    if length < 2:
        raise InvalidArgumentError("single point crossover needs length >= 2")
    k = int(rng.integers(1, length)) if cut is None else cut
    if not 1 <= k <= length - 1:
        raise InvalidArgumentError(f"cut point {k} outside 1..{length - 1}")
    return np.concatenate([a[:k], b[k:]]), np.concatenate([b[:k], a[k:]])


def _single_point_batch(A: np.ndarray, B: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    length = A.shape[1]
    if length < 2:
        return A.copy(), B.copy()
    cuts = rng.integers(1, length, size=len(A))
    head = np.arange(length)[None, :] < cuts[:, None]
    return np.where(head, A, B), np.where(head, B, A)


def bit_flip_mutation(g, rate: float, rng) -> np.ndarray:
    if not 0.0 <= rate <= 1.0:
        raise InvalidArgumentError("mutation rate must lie in [0, 1]")
    g = np.asarray(g, dtype=bool)
    return g ^ (rng.random(g.shape) < rate)


def _sbx_spread(u: np.ndarray, eta: float) -> np.ndarray:
    return np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)),
        (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0)),
    )


def sbx_crossover(a, b, eta: float, bounds, rng, gene_prob: float = 0.5, clip: bool = True):
    """Simulated binary crossover.

    Each gene is recombined with probability ``gene_prob``; the two children
    are symmetric about the parents' midpoint before clipping to ``bounds``.
    """
    if eta <= 0:
        raise InvalidArgumentError("SBX distribution index must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError("parents differ in length")
    beta = _sbx_spread(rng.random(a.shape), eta)
    active = (rng.random(a.shape) < gene_prob) & (np.abs(a - b) > 1e-14)
    beta = np.where(active, beta, 1.0)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    # beta == 1 reproduces the parents exactly
    c1 = np.where(active, mid - beta * half, a)
    c2 = np.where(active, mid + beta * half, b)
    if clip:
        lo, hi = bounds
        c1 = np.clip(c1, lo, hi)
        c2 = np.clip(c2, lo, hi)
    return c1, c2


def polynomial_mutation(g, rate: float, eta: float, bounds, rng, clip: bool = True) -> np.ndarray:
    if not 0.0 <= rate <= 1.0:
        raise InvalidArgumentError("mutation rate must lie in [0, 1]")
    if eta <= 0:
        raise InvalidArgumentError("mutation distribution index must be positive")
    g = np.asarray(g, dtype=float)
    lo, hi = bounds
    u = rng.random(g.shape)
    mutate = rng.random(g.shape) < rate
    delta = np.where(
        u < 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - u)) ** (1.0 / (eta + 1.0)),
    )
    out = np.where(mutate, g + delta * (np.asarray(hi) - np.asarray(lo)), g)
    return np.clip(out, lo, hi) if clip else out


# --------------------------------------------------------------------------
# SPEA2


def _normalized(F: np.ndarray) -> np.ndarray:
    lo = F.min(axis=0)
    span = F.max(axis=0) - lo
    span[span <= 0] = 1.0
    return (F - lo) / span


def _pairwise_distances(F: np.ndarray) -> np.ndarray:
    Z = _normalized(F)
    diff = Z[:, None, :] - Z[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def spea2_strength_raw(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    D = dominance_matrix(F)
    strength = D.sum(axis=1).astype(float)
    raw = (D * strength[:, None]).sum(axis=0)
    return strength, raw


def _spea2_fitness_matrix(F: np.ndarray) -> np.ndarray:
    n = len(F)
    _, raw = spea2_strength_raw(F)
    if n == 1:
        return raw + 0.5
    k = min(int(math.sqrt(n)), n - 1)
    dist = _pairwise_distances(F)
    np.fill_diagonal(dist, np.inf)
    sigma_k = np.partition(dist, k - 1, axis=1)[:, k - 1] if k >= 1 else np.zeros(n)
    return raw + 1.0 / (sigma_k + 2.0)


def spea2_assign_fitness(population: Sequence[Individual], archive: Sequence[Individual]) -> list[float]:
    """Raw fitness plus density for ``population + archive`` (that order).

    Density uses the k-th nearest neighbour (k = floor(sqrt(n)), self
    excluded) in range-normalized objective space.
    """
    union = list(population) + list(archive)
    if not union:
        return []
    return _spea2_fitness_matrix(_objective_matrix(union)).tolist()


def _truncate(F: np.ndarray, keep: np.ndarray, size: int) -> np.ndarray:
    """Iteratively drop the member closest to its neighbours until ``size`` remain."""
    idx = np.flatnonzero(keep)
    dist = _pairwise_distances(F[idx])
    np.fill_diagonal(dist, np.inf)
    alive = np.ones(len(idx), dtype=bool)
    while alive.sum() > size:
        sub = dist[np.ix_(alive, alive)]
        rows = np.sort(sub, axis=1)
        # lexicographic minimum over sorted neighbour distances
        cand = np.arange(len(rows))
        for c in range(rows.shape[1]):
            col = rows[cand, c]
            cand = cand[col == col.min()]
            if len(cand) == 1:
                break
        victim = np.flatnonzero(alive)[cand[0]]
        alive[victim] = False
    out = np.zeros(len(F), dtype=bool)
    out[idx[alive]] = True
    return out


def _environmental_selection_indices(F: np.ndarray, fitness: np.ndarray, size: int) -> np.ndarray:
    n = len(F)
    if n <= size:
        return np.arange(n)
    nd = fitness < 1.0
    if nd.sum() == size:
        return np.flatnonzero(nd)
    if nd.sum() < size:
        order = np.argsort(fitness, kind="stable")
        return np.sort(order[:size])
    return np.flatnonzero(_truncate(F, nd, size))


def spea2_environmental_selection(union: Sequence[Individual], archive_size: int) -> list[Individual]:
    union = list(union)
    if not union:
        raise InvalidArgumentError("environmental selection on an empty union")
    F = _objective_matrix(union)
    fitness = _spea2_fitness_matrix(F)
    for ind, fit in zip(union, fitness):
        ind.fitness = float(fit)
    return [union[i] for i in _environmental_selection_indices(F, fitness, archive_size)]


# --------------------------------------------------------------------------
# Drivers


def _rng_streams(seed: int, generations: int):
    children = np.random.SeedSequence(seed).spawn(generations + 1)
    return children[0], children[1:]


def _split(seq: np.random.SeedSequence, count: int = 3):
    return [np.random.default_rng(s) for s in seq.spawn(count)]


def _initial_genomes(problem, params: EaParams, seeds, rng) -> np.ndarray:
    seeds = [np.asarray(s) for s in (seeds or [])]
    for s in seeds:
        if s.shape != (problem.n_var,):
            raise InvalidArgumentError(
                f"seed genome length {s.shape} does not match problem length {problem.n_var}"
            )
    if len(seeds) > params.population_size:
        raise InvalidArgumentError("more seed genomes than population slots")
    fill = params.population_size - len(seeds)
    parts = []
    if seeds:
        parts.append(np.stack(seeds).astype(_genome_dtype(problem)))
    if fill:
        parts.append(np.asarray(problem.random_genomes(fill, rng)).astype(_genome_dtype(problem)))
    return np.concatenate(parts, axis=0)


def _genome_dtype(problem):
    return bool if problem.encoding == "binary" else float


def _evaluate(problem, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    repair = getattr(problem, "repair", None)
    if repair is not None:
        G = np.asarray(repair(G))
    F = np.asarray(problem.evaluate(G), dtype=float)
    if F.shape != (len(G), problem.n_obj):
        raise InvalidArgumentError(f"evaluate returned shape {F.shape}")
    if not np.isfinite(F).all():
        raise InvalidArgumentError("objective values must be finite")
    return G, F


def _vary(problem, params: EaParams, parents: np.ndarray, rngs) -> np.ndarray:
    _, cx_rng, mut_rng = rngs
    n = len(parents)
    if n % 2:
        parents = np.concatenate([parents, parents[:1]])
    A, B = parents[0::2], parents[1::2]
    do_cx = cx_rng.random(len(A)) < params.crossover_rate
    if problem.encoding == "binary":
        C1, C2 = _single_point_batch(A, B, cx_rng)
        C1 = np.where(do_cx[:, None], C1, A)
        C2 = np.where(do_cx[:, None], C2, B)
        kids = np.empty((2 * len(A), A.shape[1]), dtype=bool)
        kids[0::2], kids[1::2] = C1, C2
        kids = bit_flip_mutation(kids, params.mutation_rate, mut_rng)
    else:
        C1, C2 = sbx_crossover(A, B, params.sbx_eta, problem.bounds, cx_rng)
        C1 = np.where(do_cx[:, None], C1, A)
        C2 = np.where(do_cx[:, None], C2, B)
        kids = np.empty((2 * len(A), A.shape[1]))
        kids[0::2], kids[1::2] = C1, C2
        kids = polynomial_mutation(kids, params.mutation_rate, params.pm_eta, problem.bounds, mut_rng)
    return kids[:n]


class _Trace:
    def __init__(self, path):
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def emit(self, algorithm: str, generation: int, F: np.ndarray, front_size: int):
        if self._fh is None:
            return
        record = {
            "algorithm": algorithm,
            "generation": generation,
            "front0_size": int(front_size),
            "best_objectives": [float(v) for v in F.min(axis=0)],
        }
        self._fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _individuals(G: np.ndarray, F: np.ndarray, idx) -> list[Individual]:
    return [Individual(genome=G[i].copy(), objectives=F[i].copy()) for i in idx]


def run_nsga2(problem, params: EaParams, seeds=(), trace_path=None, on_generation=None) -> list[Individual]:
    """Elitist NSGA-II; returns front 0 of the final population.

    Generation zero is ``seeds`` verbatim followed by
    ``problem.random_genomes`` up to the population size.
    """
    init_seq, gen_seqs = _rng_streams(params.rng_seed, params.generations)
    G = _initial_genomes(problem, params, seeds, np.random.default_rng(init_seq))
    G, F = _evaluate(problem, G)
    rank, crowd = rank_and_crowding(F)
    mu = params.population_size
    trace = _Trace(trace_path)
    try:
        for gen, seq in enumerate(gen_seqs):
            rngs = _split(seq)
            keys = np.column_stack([rank, -crowd])
            parents = G[_tournament_indices(keys, mu, rngs[0])]
            kids, Fk = _evaluate(problem, _vary(problem, params, parents, rngs))
            UG = np.concatenate([G, kids])
            UF = np.concatenate([F, Fk])
            chosen = []
            for front in fast_nondominated_sort(UF):
                if len(chosen) + len(front) <= mu:
                    chosen.extend(front)
                    if len(chosen) == mu:
                        break
                    continue
                cd = crowding_distance(UF[front])
                order = np.argsort(-cd, kind="stable")
                chosen.extend(np.asarray(front)[order[: mu - len(chosen)]].tolist())
                break
            chosen = np.sort(np.asarray(chosen))
            G, F = UG[chosen], UF[chosen]
            rank, crowd = rank_and_crowding(F)
            trace.emit("nsga2", gen + 1, F, (rank == 0).sum())
            if on_generation is not None:
                on_generation(gen + 1, G, F, rank)
    finally:
        trace.close()
    return _individuals(G, F, np.flatnonzero(rank == 0))


@dataclass
class Spea2Result:
    archive: ParetoArchive
    population: list[Individual]
    internal_archive: list[Individual] = field(default_factory=list)


def run_spea2(problem, params: EaParams, seeds=(), trace_path=None, on_generation=None,
              fitness_scaling: Callable[[np.ndarray], np.ndarray] | None = None) -> Spea2Result:
    """Standard SPEA2 loop.

    ``internal_archive`` is the fixed-size SPEA2 archive (it may hold
    dominated fill members); ``archive`` is its non-dominated part as a
    ``ParetoArchive``.  ``fitness_scaling`` maps fitness values before
    mating selection and defaults to the identity.
    """
    size = params.effective_archive_size
    init_seq, gen_seqs = _rng_streams(params.rng_seed, params.generations)
    G, F = _evaluate(problem, _initial_genomes(problem, params, seeds, np.random.default_rng(init_seq)))
    AG = np.empty((0, G.shape[1]), dtype=G.dtype)
    AF = np.empty((0, F.shape[1]))
    trace = _Trace(trace_path)
    fit_a = np.empty(0)
    try:
        for gen in range(params.generations + 1):
            UG = np.concatenate([G, AG])
            UF = np.concatenate([F, AF])
            fit = _spea2_fitness_matrix(UF)
            keep = _environmental_selection_indices(UF, fit, size)
            AG, AF, fit_a = UG[keep], UF[keep], fit[keep]
            nd = fit_a < 1.0
            trace.emit("spea2", gen, AF, nd.sum())
            if on_generation is not None:
                on_generation(gen, AG, AF, fit_a)
            if gen == params.generations:
                break
            rngs = _split(gen_seqs[gen])
            scaled = fit_a if fitness_scaling is None else np.asarray(fitness_scaling(fit_a))
            parents = AG[_tournament_indices(scaled[:, None], params.population_size, rngs[0])]
            G, F = _evaluate(problem, _vary(problem, params, parents, rngs))
    finally:
        trace.close()
    internal = _individuals(AG, AF, range(len(AG)))
    for ind, f in zip(internal, fit_a):
        ind.fitness = float(f)
    pareto = ParetoArchive()
    for ind in internal:
        pareto.insert(ind)
    return Spea2Result(archive=pareto, population=_individuals(G, F, range(len(G))), internal_archive=internal)
