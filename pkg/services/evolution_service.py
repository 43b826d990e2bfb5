"""
Evolution service for the neatpad workbench.
Handles the generational loop: evaluate, speciate, track stagnation,
apportion offspring and reproduce.

Random streams are derived from the run key as
``run.split(1).split(generation).split(slot).split(operator)`` so results never
depend on thread count or scheduling.
"""

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.data_models import GenerationStats, NeatConfig, RunStats
from models.errors import EvaluationError, LimitsTooSmall, NeatError
from services.encoding_service import (
    AttributeSchema,
    GenomeTensors,
    PopulationTensors,
    concat_population,
    pad_genome,
)
from services.genome_service import InnovationTable, batch_distance, crossover, mutate, new_node_row
from services.inference_service import DEFAULT_SCHEMA, stack_networks, transform_population
from services.problem_service import BaseProblem
from utils.rng import CROSSOVER, EVALUATE, MUTATE, SELECT, RngKey

# Top-level stream indices under the run key
INIT_STREAM = 0
GENERATION_STREAM = 1
SETUP_STREAM = 2


@dataclass(frozen=True)
class Species:
    id: int
    representative: GenomeTensors
    members: Tuple[int, ...]
    best_fitness: float = -math.inf
    stagnation: int = 0


@dataclass(frozen=True)
class SpeciesState:
    """Species of the current generation, ascending id."""
    species: Tuple[Species, ...] = ()
    next_id: int = 1

    def __len__(self) -> int:
        return len(self.species)

    def membership(self, size: int) -> np.ndarray:
        """Species id of every population slot (-1 when unassigned)."""
        ids = np.full(size, -1, dtype=np.int64)
        for sp in self.species:
            ids[list(sp.members)] = sp.id
        return ids

    def sizes(self) -> List[int]:
        return [len(sp.members) for sp in self.species]


def initialize_population(
    cfg: NeatConfig,
    key: RngKey,
    num_inputs: Optional[int] = None,
    num_outputs: Optional[int] = None,
    output_activation: Optional[str] = None,
    schema: AttributeSchema = DEFAULT_SCHEMA,
) -> PopulationTensors:
    """
    Build the minimal starting population.

    Each genome has the input and output nodes, one hidden node (key I+O),
    and enabled connections input -> hidden and hidden -> output, with
    attributes drawn from the init distributions on a per-genome stream.

    Args:
        cfg: Run config
        key: Initialization key; genome i draws from key.split(i)
        num_inputs: Input count (defaults to cfg.inputs)
        num_outputs: Output count (defaults to cfg.outputs)
        output_activation: Activation of output nodes (defaults to cfg.activation_default)
        schema: Function registries

    Raises:
        LimitsTooSmall: If the limits cannot hold the initial topology
    """
    num_inputs = num_inputs or cfg.inputs
    num_outputs = num_outputs or cfg.outputs
    if not num_inputs or not num_outputs:
        raise LimitsTooSmall("input and output counts must be known to initialize")
    if num_inputs + num_outputs + 1 > cfg.max_nodes:
        raise LimitsTooSmall(f"{num_inputs + num_outputs + 1} initial nodes exceed max_nodes={cfg.max_nodes}")
    if num_inputs + num_outputs > cfg.max_conns:
        raise LimitsTooSmall(f"{num_inputs + num_outputs} initial connections exceed max_conns={cfg.max_conns}")

    mutation = cfg.mutation
    hidden = num_inputs + num_outputs
    identity = float(schema.activation_id("identity"))
    aggregation = float(schema.aggregation_id(cfg.aggregation_default))

    genomes = []
    for index in range(cfg.pop_size):
        rng = key.split(index).generator()
        nodes = [np.array([k, 0.0, 1.0, aggregation, identity]) for k in range(num_inputs)]
        nodes += [new_node_row(k, rng, mutation, schema, output_activation)
                  for k in range(num_inputs, hidden)]
        nodes.append(new_node_row(hidden, rng, mutation, schema))
        conns = [np.array([k, hidden, 1.0, cfg.weight_init_mean + rng.normal() * cfg.weight_init_std])
                 for k in range(num_inputs)]
        conns += [np.array([hidden, k, 1.0, cfg.weight_init_mean + rng.normal() * cfg.weight_init_std])
                  for k in range(num_inputs, hidden)]
        genomes.append(pad_genome(nodes, conns, cfg.limits, num_inputs, num_outputs, schema))

    logging.debug(f"Initialized {cfg.pop_size} genomes with {num_inputs} inputs, {num_outputs} outputs")
    return concat_population(genomes)


def speciate(pop: PopulationTensors, prev: SpeciesState, fitness: np.ndarray, cfg: NeatConfig) -> SpeciesState:
    """
    Assign every genome to a species.

    A genome joins the first species (ascending id) whose representative is
    closer than compatibility_threshold; otherwise it founds a new species
    while fewer than max_species exist, else joins the nearest one.
    Representatives move to the member closest to the previous one.
    """
    distance_cfg = cfg.distance
    founders: List[Tuple[int, Optional[Species], GenomeTensors]] = [
        (sp.id, sp, sp.representative) for sp in prev.species
    ]
    distances = [batch_distance(pop, rep, distance_cfg) for _, _, rep in founders]
    members: List[List[int]] = [[] for _ in founders]
    next_id = prev.next_id

    for index in range(len(pop)):
        column = np.array([d[index] for d in distances])
        close = np.flatnonzero(column < cfg.compatibility_threshold)
        if close.size:
            members[int(close[0])].append(index)
        elif len(founders) < cfg.max_species:
            genome = pop.genome(index)
            founders.append((next_id, None, genome))
            distances.append(batch_distance(pop, genome, distance_cfg))
            members.append([index])
            next_id += 1
        else:
            members[int(np.argmin(column))].append(index)

    species = []
    for (sid, old, rep), group, dist in zip(founders, members, distances):
        if not group:
            continue
        if old is None:
            species.append(Species(id=sid, representative=rep, members=tuple(group)))
        else:
            closest = group[int(np.argmin(dist[group]))]
            species.append(replace(old, representative=pop.genome(closest), members=tuple(group)))

    logging.debug(f"Speciated into {len(species)} species: {[len(s.members) for s in species]}")
    return SpeciesState(species=tuple(species), next_id=next_id)


def _species_max(sp: Species, fitness: np.ndarray) -> float:
    return float(np.max(fitness[list(sp.members)]))


def update_stagnation(s: SpeciesState, fitness: np.ndarray, cfg: NeatConfig) -> SpeciesState:
    """
    Advance stagnation counters and drop species stagnant past max_stagnation.

    The species_elitism best species (by current max fitness) are always kept,
    and at least one species survives.
    """
    updated = []
    for sp in s.species:
        best = _species_max(sp, fitness)
        if best > sp.best_fitness:
            updated.append(replace(sp, best_fitness=best, stagnation=0))
        else:
            updated.append(replace(sp, stagnation=sp.stagnation + 1))

    ranking = sorted(range(len(updated)), key=lambda i: (-_species_max(updated[i], fitness), updated[i].id))
    protected = set(ranking[:cfg.species_elitism])
    kept = [sp for i, sp in enumerate(updated) if i in protected or sp.stagnation <= cfg.max_stagnation]
    if not kept and updated:
        kept = [updated[ranking[0]]]
        logging.warning(f"Every species stagnated; keeping species {kept[0].id}")

    kept_ids = {sp.id for sp in kept}
    removed = [sp.id for sp in updated if sp.id not in kept_ids]
    if removed:
        logging.info(f"Removed stagnant species {removed}")
    return replace(s, species=tuple(kept))


def rank_normalize(fitness: np.ndarray) -> np.ndarray:
    """Average ranks mapped onto [0, 1]; ties share a rank."""
    fitness = np.asarray(fitness, dtype=np.float64)
    if fitness.size < 2:
        return np.zeros(fitness.size)
    ranks = pd.Series(fitness).rank(method="average").to_numpy()
    return (ranks - 1.0) / (fitness.size - 1.0)


def clamp_spawn(old_size: int, target: float, rate: float) -> float:
    """Move from old_size toward target by at most rate * old_size (rounded half up)."""
    limit = math.floor(rate * old_size + 0.5)
    return old_size + float(np.clip(target - old_size, -limit, limit))


def largest_remainder(weights: Sequence[float], total: int) -> List[int]:
    """Integers proportional to weights summing to total; ties go to the earlier entry."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quotas = weights * total / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    remainders = quotas - counts
    for index in sorted(range(len(counts)), key=lambda i: (-remainders[i], i))[:total - int(counts.sum())]:
        counts[index] += 1
    return counts.tolist()


def compute_spawn_counts(s: SpeciesState, fitness: np.ndarray, cfg: NeatConfig) -> List[int]:
    """
    Offspring count per species, aligned with s.species.

    Shares follow each species' mean rank-normalized fitness; each species
    moves toward its share by at most spawn_number_change_rate of its size,
    counts are rescaled to pop_size by largest remainder, and every species
    keeps at least min(genome_elitism, pop_size // species) slots.
    """
    ranks = rank_normalize(fitness)
    means = np.array([ranks[list(sp.members)].mean() for sp in s.species])
    shares = means / means.sum() if means.sum() > 0 else np.full(len(means), 1.0 / len(means))

    clamped = [
        clamp_spawn(len(sp.members), share * cfg.pop_size, cfg.spawn_number_change_rate)
        for sp, share in zip(s.species, shares)
    ]
    counts = largest_remainder(clamped, cfg.pop_size)

    floor = min(cfg.genome_elitism, cfg.pop_size // len(counts))
    for index in range(len(counts)):
        while counts[index] < floor:
            donor = max(range(len(counts)), key=lambda i: (counts[i], -i))
            counts[donor] -= 1
            counts[index] += 1
    return counts


def parent_pool(members: Sequence[int], fitness: np.ndarray, survival_threshold: float) -> List[int]:
    """Top ceil(survival_threshold * size) members, fittest first (ties: lower index)."""
    ranked = sorted(members, key=lambda i: (-fitness[i], i))
    size = max(1, math.ceil(round(survival_threshold * len(ranked), 9)))
    return ranked[:size]


def reproduce(
    pop: PopulationTensors,
    s: SpeciesState,
    fitness: np.ndarray,
    cfg: NeatConfig,
    key: RngKey,
    innovations: InnovationTable,
    spawn: Optional[Sequence[int]] = None,
    schema: AttributeSchema = DEFAULT_SCHEMA,
) -> PopulationTensors:
    """
    Build the next population species by species.

    Args:
        pop: Current population
        s: Species after stagnation
        fitness: Fitness of every slot of `pop`
        cfg: Run config
        key: Generation key; child slot j uses key.split(j)
        innovations: Node-split markers for this generation
        spawn: Offspring per species (computed when omitted)
        schema: Function registries

    Returns:
        The next population; each species contributes its elites unchanged
        followed by mutated crossovers of parents drawn from its survivors
    """
    if spawn is None:
        spawn = compute_spawn_counts(s, fitness, cfg)
    mutation = cfg.mutation

    children: List[GenomeTensors] = []
    for sp, count in zip(s.species, spawn):
        ranked = sorted(sp.members, key=lambda i: (-fitness[i], i))
        elites = ranked[:min(cfg.genome_elitism, count)]
        children.extend(pop.genome(i) for i in elites)

        pool = parent_pool(sp.members, fitness, cfg.survival_threshold)
        for _ in range(count - len(elites)):
            slot_key = key.split(len(children))
            rng = slot_key.split(SELECT).generator()
            a, b = sorted((pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]),
                          key=lambda i: (-fitness[i], i))
            child = crossover(pop.genome(a), pop.genome(b), slot_key.split(CROSSOVER))
            children.append(mutate(child, slot_key.split(MUTATE), mutation, innovations, schema))

    return concat_population(children)


def evaluate_population(
    problem: BaseProblem,
    pop: PopulationTensors,
    key: RngKey,
    generation: int,
    schema: AttributeSchema = DEFAULT_SCHEMA,
    workers: int = 1,
) -> np.ndarray:
    """
    Fitness of every genome; slot i is evaluated with key.split(i).split(EVALUATE).

    Raises:
        EvaluationError: If evaluation fails or yields a non-finite fitness
    """
    try:
        networks = transform_population(pop)
    except NeatError as e:
        raise EvaluationError(generation, -1, f"transform failed: {e}") from e
    keys = [key.split(i).split(EVALUATE) for i in range(len(pop))]
    if not problem.pure and workers > 1:
        logging.debug(f"{problem.name} keeps state between episodes; evaluating on one thread")
        workers = 1
    try:
        fitness = np.asarray(problem.evaluate_population(keys, stack_networks(networks), schema, workers),
                             dtype=np.float64)
    except NeatError as e:
        raise EvaluationError(generation, -1, str(e)) from e

    bad = np.flatnonzero(~np.isfinite(fitness))
    if bad.size:
        raise EvaluationError(generation, int(bad[0]), f"non-finite fitness {fitness[bad[0]]}")
    return fitness


def _generation_stats(generation: int, fitness: np.ndarray, sizes: List[int], started: float) -> GenerationStats:
    return GenerationStats(
        generation=generation,
        best=float(fitness.max()),
        mean=float(fitness.mean()),
        std=float(fitness.std()),
        species_count=len(sizes),
        species_sizes=sizes,
        elapsed_ms=(time.perf_counter() - started) * 1000.0,
    )


def evolve(
    problem: BaseProblem,
    cfg: NeatConfig,
    key: RngKey,
    workers: int = 1,
    schema: AttributeSchema = DEFAULT_SCHEMA,
    on_generation: Optional[Callable[[GenerationStats], None]] = None,
) -> Tuple[GenomeTensors, RunStats]:
    """
    Run the generational loop until fitness_target or generation_limit.

    Args:
        problem: Problem to optimize
        cfg: Run config
        key: Run key
        workers: Evaluation threads; results do not depend on it
        schema: Function registries
        on_generation: Called with each generation's stats once it completes

    Returns:
        Tuple of (fittest genome of the last evaluated generation, RunStats)

    Raises:
        EvaluationError: With the generation and genome index at fault
    """
    for name in cfg.activation_options + [problem.output_activation]:
        schema.activation_id(name)
    for name in cfg.aggregation_options:
        schema.aggregation_id(name)

    num_inputs, num_outputs = problem.input_shape, problem.output_shape
    problem.setup(key.split(SETUP_STREAM))
    pop = initialize_population(cfg, key.split(INIT_STREAM), num_inputs, num_outputs,
                                problem.output_activation, schema)
    innovations = InnovationTable(num_inputs + num_outputs + 1)
    state = SpeciesState()
    stats = RunStats()
    logging.info(f"Evolving {problem.name}: pop_size={cfg.pop_size}, generation_limit={cfg.generation_limit}")

    fitness = np.zeros(len(pop))
    for generation in range(cfg.generation_limit):
        started = time.perf_counter()
        gen_key = key.split(GENERATION_STREAM).split(generation)

        fitness = evaluate_population(problem, pop, gen_key, generation, schema, workers)
        state = speciate(pop, state, fitness, cfg)
        sizes = state.sizes()

        finished = fitness.max() >= cfg.fitness_target or generation == cfg.generation_limit - 1
        if not finished:
            state = update_stagnation(state, fitness, cfg)
            spawn = compute_spawn_counts(state, fitness, cfg)
            innovations.new_generation()
            next_pop = reproduce(pop, state, fitness, cfg, gen_key, innovations, spawn, schema)

        record = _generation_stats(generation, fitness, sizes, started)
        stats.generations.append(record)
        logging.debug(f"Generation {generation}: best {record.best:.6f}, mean {record.mean:.6f}, "
                      f"{record.species_count} species")
        if on_generation is not None:
            on_generation(record)

        if finished:
            break
        pop = next_pop

    best = int(np.argmax(fitness))
    logging.info(f"Finished after {len(stats.generations)} generations; best fitness {fitness[best]:.6f}")
    return pop.genome(best), stats
