"""
NSGA-II search over access-count genomes

A genome holds one count per allowed target (REG first). Objectives are maximized;
individuals whose metrics were unavailable are invalid and rank below every valid one.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from tqdm import tqdm

from workload import (
    REG, AccessGroup, AccessSet, EmberError, Target, format_access_set, parse_target,
)

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = 'REG,L1_L,L1_LS,L2_L,L3_L,RAM_L'


class OptimizerError(EmberError, ValueError):
    """Invalid optimizer parameters or inputs"""


class EvaluationError(EmberError, RuntimeError):
    """Evaluator failed for one candidate"""

    def __init__(self, generation: int, index: int, cause: BaseException):
        self.generation = generation
        self.index = index
        self.cause = cause
        super().__init__(f"evaluation failed in generation {generation}, individual {index}: {cause}")


@dataclass(frozen=True)
class Genome:
    """Access counts aligned with the optimizer's target list"""
    counts: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'counts', tuple(int(c) for c in self.counts))
        if not self.counts:
            raise OptimizerError("genome is empty")
        if any(c < 0 for c in self.counts):
            raise OptimizerError(f"genome counts must be >= 0: {self.counts}")
        if not any(self.counts):
            raise OptimizerError("genome needs at least one non-zero count")

    def __len__(self) -> int:
        return len(self.counts)


@dataclass
class Individual:
    genome: Genome
    objectives: Tuple[float, ...]
    valid: bool = True
    rank: Optional[int] = None
    crowding: float = 0.0

    def __post_init__(self):
        self.objectives = tuple(float(v) for v in self.objectives)
        if self.valid and not all(math.isfinite(v) for v in self.objectives):
            raise OptimizerError(f"valid individual with non-finite objectives {self.objectives}")


@dataclass(frozen=True)
class OptimizerParams:
    population: int = 40
    generations: int = 20
    mutation_prob: float = 0.35
    max_count: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise OptimizerError(f"population must be even and >= 4, got {self.population}")
        if self.generations < 1:
            raise OptimizerError(f"generations must be >= 1, got {self.generations}")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise OptimizerError(f"mutation probability must be in [0, 1], got {self.mutation_prob}")
        if self.max_count < 1:
            raise OptimizerError(f"max count must be >= 1, got {self.max_count}")

    @property
    def total_evaluations(self) -> int:
        return self.population * (self.generations + 1)


@dataclass
class OptimizationResult:
    population: List[Individual]
    front: List[Individual]
    evaluations: int
    # best objective-0 value of each generation's population, generation 0 first
    history: List[float] = field(default_factory=list)


Evaluator = Callable[[Genome], Individual]


def parse_targets(text: str) -> List[Target]:
    """Comma separated target list for the genome; REG is moved or added to the front"""
    targets = []
    for token in text.split(','):
        if token.strip():
            target = parse_target(token)
            if target in targets:
                raise OptimizerError(f"duplicate optimizer target {target}")
            targets.append(target)
    if REG in targets:
        targets.remove(REG)
    return [REG] + targets


def decode_genome(genome: Genome, targets: Sequence[Target]) -> AccessSet:
    """AccessSet of the non-zero genes, in target order"""
    if len(genome) != len(targets):
        raise OptimizerError(f"genome has {len(genome)} genes for {len(targets)} targets")
    return AccessSet(tuple(AccessGroup(t, c) for t, c in zip(targets, genome.counts) if c > 0))


def dominates(a: Individual, b: Individual) -> bool:
    """True iff a is >= b in every objective and > in at least one"""
    return _dominates(a.objectives, b.objectives)


def _dominates(x: Sequence[float], y: Sequence[float]) -> bool:
    if len(x) != len(y):
        raise OptimizerError(f"objective arity mismatch: {len(x)} vs {len(y)}")
    better = False
    for xi, yi in zip(x, y):
        if xi < yi:
            return False
        if xi > yi:
            better = True
    return better


def fast_nondominated_sort(population: Sequence[Individual]) -> List[List[int]]:
    """
    Split the population into Pareto fronts of indices, best front first.

    Invalid individuals form one trailing front after every valid front.
    """
    valid = [i for i, ind in enumerate(population) if ind.valid]
    invalid = [i for i, ind in enumerate(population) if not ind.valid]

    dominated_by = {i: [] for i in valid}
    domination_count = {i: 0 for i in valid}
    fronts: List[List[int]] = [[]]
    for pos, p in enumerate(valid):
        for q in valid[pos + 1:]:
            if _dominates(population[p].objectives, population[q].objectives):
                dominated_by[p].append(q)
                domination_count[q] += 1
            elif _dominates(population[q].objectives, population[p].objectives):
                dominated_by[q].append(p)
                domination_count[p] += 1
    for p in valid:
        if domination_count[p] == 0:
            fronts[0].append(p)

    current = 0
    while fronts[current]:
        following = []
        for p in fronts[current]:
            for q in dominated_by[p]:
                domination_count[q] -= 1
                if domination_count[q] == 0:
                    following.append(q)
        current += 1
        fronts.append(sorted(following))
    fronts.pop()

    if invalid:
        fronts.append(invalid)
    return fronts


def crowding_distance(front: Sequence[Individual]) -> List[float]:
    """Per-member crowding distance; boundary members get +inf"""
    size = len(front)
    if size == 0:
        return []
    if size <= 2:
        return [math.inf] * size

    distances = [0.0] * size
    for m in range(len(front[0].objectives)):
        order = sorted(range(size), key=lambda i: front[i].objectives[m])
        low = front[order[0]].objectives[m]
        high = front[order[-1]].objectives[m]
        if high == low:
            continue
        distances[order[0]] = math.inf
        distances[order[-1]] = math.inf
        for k in range(1, size - 1):
            i = order[k]
            if math.isinf(distances[i]):
                continue
            gap = front[order[k + 1]].objectives[m] - front[order[k - 1]].objectives[m]
            distances[i] += gap / (high - low)
    return distances


def assign_rank_and_crowding(population: Sequence[Individual]) -> List[List[int]]:
    """Sort into fronts and store rank and crowding on every member"""
    fronts = fast_nondominated_sort(population)
    for rank, front in enumerate(fronts):
        members = [population[i] for i in front]
        if members[0].valid:
            distances = crowding_distance(members)
        else:
            distances = [0.0] * len(members)
        for ind, distance in zip(members, distances):
            ind.rank = rank
            ind.crowding = distance
    return fronts


def tournament_select(population: Sequence[Individual], rng: np.random.Generator) -> Individual:
    """Binary tournament: lower rank wins, then larger crowding distance, then lower index"""
    if not population:
        raise OptimizerError("tournament on an empty population")
    first, second = (int(i) for i in rng.integers(len(population), size=2))

    def key(index: int):
        ind = population[index]
        return (ind.rank, -ind.crowding, index)

    return population[min(first, second, key=key)]


def _repair(counts: np.ndarray, rng: np.random.Generator) -> Genome:
    if not counts.any():
        counts[int(rng.integers(len(counts)))] = 1
    return Genome(tuple(int(c) for c in counts))


def recombine(parent_a: Genome, parent_b: Genome, rng: np.random.Generator, max_count: Optional[int] = None) -> Genome:
    """Uniform crossover; an all-zero child gets one random gene set to 1"""
    if len(parent_a) != len(parent_b):
        raise OptimizerError(f"parent genomes differ in length: {len(parent_a)} vs {len(parent_b)}")
    a = np.array(parent_a.counts)
    b = np.array(parent_b.counts)
    child = np.where(rng.random(len(a)) < 0.5, a, b)
    if max_count is not None:
        child = np.clip(child, 0, max_count)
    return _repair(child, rng)


def mutate(genome: Genome, mutation_prob: float, rng: np.random.Generator, max_count: int) -> Genome:
    """Resample each gene uniformly from [0, max_count] with probability mutation_prob"""
    counts = np.array(genome.counts)
    mask = rng.random(len(counts)) < mutation_prob
    fresh = rng.integers(0, max_count + 1, size=len(counts))
    return _repair(np.where(mask, fresh, counts), rng)


def random_genome(length: int, max_count: int, rng: np.random.Generator) -> Genome:
    return _repair(rng.integers(0, max_count + 1, size=length), rng)


def format_log_line(generation: int, index: int, individual: Individual, targets: Sequence[Target]) -> str:
    grammar = format_access_set(decode_genome(individual.genome, targets))
    if individual.valid:
        values = [f"{v:.6g}" for v in individual.objectives]
    else:
        values = ['nan'] * len(individual.objectives)
    return '\t'.join([str(generation), str(index), grammar, *values, '1' if individual.valid else '0'])


def _evaluate_all(genomes: List[Genome], evaluator: Evaluator, generation: int,
                  workers: int, progress: bool) -> List[Individual]:
    results: List[Optional[Individual]] = [None] * len(genomes)
    desc = f"Gen {generation}"
    if workers <= 1:
        for index, genome in enumerate(tqdm(genomes, desc=desc, leave=False, disable=not progress)):
            results[index] = _evaluate_one(evaluator, genome, generation, index)
        return results

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_evaluate_one, evaluator, genome, generation, index): index
                   for index, genome in enumerate(genomes)}
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc, leave=False, disable=not progress):
            results[futures[future]] = future.result()
    return results


def _evaluate_one(evaluator: Evaluator, genome: Genome, generation: int, index: int) -> Individual:
    try:
        return evaluator(genome)
    except EvaluationError:
        raise
    except Exception as e:
        raise EvaluationError(generation, index, e) from e


def _write_generation(log: Optional[TextIO], generation: int, individuals: Sequence[Individual],
                      targets: Sequence[Target]):
    if log is None:
        return
    for index, individual in enumerate(individuals):
        log.write(format_log_line(generation, index, individual, targets) + '\n')
    log.flush()


def _best_objective(population: Sequence[Individual]) -> float:
    values = [ind.objectives[0] for ind in population if ind.valid]
    return max(values) if values else math.nan


def _select_survivors(merged: List[Individual], size: int) -> List[Individual]:
    fronts = assign_rank_and_crowding(merged)
    survivors: List[Individual] = []
    for front in fronts:
        if len(survivors) + len(front) <= size:
            survivors.extend(merged[i] for i in front)
            continue
        by_crowding = sorted(front, key=lambda i: (-merged[i].crowding, i))
        survivors.extend(merged[i] for i in by_crowding[:size - len(survivors)])
        break
    return survivors


def pareto_front(population: Sequence[Individual]) -> List[Individual]:
    """Valid non-dominated members, best objective 0 first"""
    fronts = fast_nondominated_sort(population)
    if not fronts or not population[fronts[0][0]].valid:
        return []
    front = [population[i] for i in fronts[0]]
    return sorted(front, key=lambda ind: tuple(-v for v in ind.objectives))


def evolve(params: OptimizerParams, targets: Sequence[Target], evaluator: Evaluator,
           log_path=None, workers: int = 1, progress: bool = True) -> OptimizationResult:
    """
    Run NSGA-II: a random generation 0, then `generations` rounds of tournament,
    uniform crossover and mutation, each followed by elitist selection over parents
    plus children. Every evaluation is appended to the log in index order.

    Raises:
        EvaluationError: the evaluator raised for a candidate
    """
    if not targets or targets[0] != REG:
        raise OptimizerError("optimizer targets must start with REG")
    rng = np.random.default_rng(params.rng_seed)
    size = params.population
    log = open(Path(log_path), 'w', encoding='utf-8', newline='\n') if log_path else None
    evaluations = 0
    history = []

    try:
        genomes = [random_genome(len(targets), params.max_count, rng) for _ in range(size)]
        population = _evaluate_all(genomes, evaluator, 0, workers, progress)
        evaluations += len(population)
        _write_generation(log, 0, population, targets)
        assign_rank_and_crowding(population)
        history.append(_best_objective(population))
        logger.debug("generation 0: best objective %.6g", history[-1])

        for generation in tqdm(range(1, params.generations + 1), desc="Generations", disable=not progress):
            children = []
            for _ in range(size):
                parent_a = tournament_select(population, rng)
                parent_b = tournament_select(population, rng)
                child = recombine(parent_a.genome, parent_b.genome, rng, params.max_count)
                children.append(mutate(child, params.mutation_prob, rng, params.max_count))

            offspring = _evaluate_all(children, evaluator, generation, workers, progress)
            evaluations += len(offspring)
            _write_generation(log, generation, offspring, targets)

            population = _select_survivors(population + offspring, size)
            history.append(_best_objective(population))
            logger.debug("generation %d: best objective %.6g", generation, history[-1])
    finally:
        if log is not None:
            log.close()

    return OptimizationResult(population=population, front=pareto_front(population),
                              evaluations=evaluations, history=history)


def exhaustive_search(targets: Sequence[Target], max_count: int, evaluator: Evaluator,
                      progress: bool = False) -> List[Individual]:
    """Evaluate every genome with counts in [0, max_count] except the all-zero one"""
    space = itertools.product(range(max_count + 1), repeat=len(targets))
    total = (max_count + 1) ** len(targets) - 1
    results = []
    for counts in tqdm(space, total=total + 1, desc="Exhaustive", disable=not progress):
        if any(counts):
            results.append(evaluator(Genome(counts)))
    return results
