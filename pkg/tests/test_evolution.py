"""Tests for population initialization, speciation, reproduction and the evolve loop."""

import math
import os
from pathlib import Path

import numpy as np
import pytest

from builders import SCHEMA, make_genome, random_genome
from cli import load_config
from models.data_models import NeatConfig
from models.errors import EvaluationError, LimitsTooSmall, UnknownFunction
from services.encoding_service import concat_population, validate_genome
from services.evolution_service import (
    INIT_STREAM,
    Species,
    SpeciesState,
    clamp_spawn,
    compute_spawn_counts,
    evaluate_population,
    evolve,
    initialize_population,
    largest_remainder,
    parent_pool,
    rank_normalize,
    reproduce,
    speciate,
    update_stagnation,
)
from services.export_service import export_service
from services.genome_service import InnovationTable
from services.problem_service import BaseProblem, CartPoleProblem, XorProblem, problem_service
from utils.rng import RngKey

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
THREADS = os.cpu_count() or 1

FROZEN = dict(
    node_add=0.0, conn_add=0.0,
    bias_mutate_rate=0.0, bias_replace_rate=0.0,
    weight_mutate_rate=0.0, weight_replace_rate=0.0,
)


class ConstantProblem(BaseProblem):
    name = "constant"

    def __init__(self, value=1.0, bad_index=None):
        self.value = value
        self.bad_index = bad_index
        self.workers_seen = []

    @property
    def input_shape(self):
        return 2

    @property
    def output_shape(self):
        return 1

    def evaluate(self, key, act):
        return self.value

    def evaluate_population(self, keys, batch, schema=SCHEMA, workers=1):
        self.workers_seen.append(workers)
        fitness = np.full(len(batch), self.value)
        if self.bad_index is not None:
            fitness[self.bad_index] = math.nan
        return fitness


def _stats_without_time(stats):
    return [g.model_dump(exclude={"elapsed_ms"}) for g in stats.generations]


class TestInitialize:

    def test_minimal_topology(self):
        pop = initialize_population(NeatConfig(pop_size=4), RngKey(0), 3, 1, "sigmoid")
        for g in pop.genomes():
            assert int(g.node_mask().sum()) == 5
            assert int(g.conn_mask().sum()) == 4
            assert validate_genome(g, SCHEMA) == []
            assert g.nodes[g.node_row(3), 4] == SCHEMA.activation_id("sigmoid")

    def test_deterministic(self):
        cfg = NeatConfig(pop_size=8)
        a = initialize_population(cfg, RngKey(11), 3, 1)
        b = initialize_population(cfg, RngKey(11), 3, 1)
        assert np.array_equal(a.nodes, b.nodes, equal_nan=True)
        assert np.array_equal(a.conns, b.conns, equal_nan=True)

    def test_genomes_differ(self):
        pop = initialize_population(NeatConfig(pop_size=2), RngKey(0), 3, 1)
        assert not pop.genome(0).equals(pop.genome(1))

    def test_limits_too_small(self):
        with pytest.raises(LimitsTooSmall):
            initialize_population(NeatConfig(pop_size=2, max_nodes=4), RngKey(0), 3, 1)
        with pytest.raises(LimitsTooSmall):
            initialize_population(NeatConfig(pop_size=2, max_conns=3), RngKey(0), 3, 1)


class TestSpeciate:

    def test_infinite_threshold_gives_one_species(self, rng):
        pop = concat_population([random_genome(rng) for _ in range(10)])
        state = speciate(pop, SpeciesState(), np.zeros(10), NeatConfig(compatibility_threshold=math.inf))
        assert state.sizes() == [10]

    def test_zero_threshold_fills_max_species(self, rng):
        pop = concat_population([random_genome(rng) for _ in range(10)])
        state = speciate(pop, SpeciesState(), np.zeros(10), NeatConfig(compatibility_threshold=0.0, max_species=3))
        assert len(state) == 3
        assert sum(state.sizes()) == 10
        assert sorted(np.concatenate([sp.members for sp in state.species]).tolist()) == list(range(10))

    def test_two_clusters(self):
        a = make_genome(2, 1, hidden=[3], conns=[(0, 3, 1.0), (3, 2, 1.0)])
        b = make_genome(2, 1, hidden=[4, 5], conns=[(1, 4, -1.0), (4, 5, 1.0), (5, 2, 1.0)])
        pop = concat_population([a, b, a, b, a, b])
        state = speciate(pop, SpeciesState(), np.zeros(6), NeatConfig(compatibility_threshold=0.5))
        assert [sp.members for sp in state.species] == [(0, 2, 4), (1, 3, 5)]
        assert state.next_id == 3

    def test_species_ids_persist(self, rng):
        genomes = [random_genome(rng) for _ in range(6)]
        cfg = NeatConfig(compatibility_threshold=math.inf)
        first = speciate(concat_population(genomes), SpeciesState(), np.zeros(6), cfg)
        second = speciate(concat_population(genomes[::-1]), first, np.zeros(6), cfg)
        assert [sp.id for sp in second.species] == [1]
        assert second.next_id == 2

    def test_membership(self, rng):
        pop = concat_population([random_genome(rng) for _ in range(4)])
        state = speciate(pop, SpeciesState(), np.zeros(4), NeatConfig(compatibility_threshold=math.inf))
        assert state.membership(4).tolist() == [1, 1, 1, 1]


def _species(sid, members, best=-math.inf, stagnation=0):
    return Species(id=sid, representative=make_genome(1, 1), members=tuple(members),
                   best_fitness=best, stagnation=stagnation)


class TestStagnation:

    def test_improving_species_resets(self):
        state = SpeciesState((_species(1, [0, 1], best=0.5, stagnation=3),))
        updated = update_stagnation(state, np.array([0.2, 1.0]), NeatConfig())
        assert updated.species[0].stagnation == 0
        assert updated.species[0].best_fitness == 1.0

    def test_stagnant_species_counts_up(self):
        state = SpeciesState((_species(1, [0], best=2.0, stagnation=3),))
        assert update_stagnation(state, np.array([1.0]), NeatConfig()).species[0].stagnation == 4

    def test_protected_by_species_elitism(self):
        state = SpeciesState((_species(1, [0], best=10.0, stagnation=15),))
        updated = update_stagnation(state, np.array([1.0]), NeatConfig(max_stagnation=15, species_elitism=2))
        assert [sp.id for sp in updated.species] == [1]
        assert updated.species[0].stagnation == 16

    def test_worst_stagnant_species_removed(self):
        state = SpeciesState(tuple(_species(i + 1, [i], best=10.0, stagnation=15) for i in range(3)))
        updated = update_stagnation(state, np.array([3.0, 2.0, 1.0]),
                                    NeatConfig(max_stagnation=15, species_elitism=2))
        assert [sp.id for sp in updated.species] == [1, 2]

    def test_one_species_always_survives(self):
        state = SpeciesState((_species(1, [0], best=10.0, stagnation=20), _species(2, [1], best=10.0, stagnation=20)))
        updated = update_stagnation(state, np.array([1.0, 2.0]), NeatConfig(max_stagnation=15, species_elitism=0))
        assert [sp.id for sp in updated.species] == [2]


class TestSpawn:

    def test_rank_normalize(self):
        assert rank_normalize(np.array([5.0, 1.0, 3.0])).tolist() == [1.0, 0.0, 0.5]
        assert rank_normalize(np.array([2.0, 2.0])).tolist() == [0.5, 0.5]

    def test_clamp(self):
        assert clamp_spawn(100, 10, 0.5) == 50
        assert clamp_spawn(100, 130, 0.5) == 130
        assert clamp_spawn(3, 0, 0.5) == 1

    def test_largest_remainder(self):
        assert largest_remainder([1.0, 1.0, 1.0], 10) == [4, 3, 3]
        assert largest_remainder([0.0, 0.0], 5) == [3, 2]

    def test_equal_split(self):
        state = SpeciesState((_species(1, range(5)), _species(2, range(5, 10))))
        fitness = np.array([1.0, 2.0, 3.0, 4.0, 5.0] * 2)
        assert compute_spawn_counts(state, fitness, NeatConfig(pop_size=10)) == [5, 5]

    def test_counts_sum_to_pop_size(self, rng):
        state = SpeciesState((_species(1, range(0, 3)), _species(2, range(3, 20)), _species(3, range(20, 30))))
        fitness = rng.normal(size=30)
        counts = compute_spawn_counts(state, fitness, NeatConfig(pop_size=30, genome_elitism=2))
        assert sum(counts) == 30
        assert min(counts) >= 2

    def test_parent_pool(self):
        fitness = np.arange(10, dtype=float)
        assert parent_pool(range(10), fitness, 0.2) == [9, 8]
        assert parent_pool([4], fitness, 0.2) == [4]


class TestReproduce:

    def test_single_member_species(self):
        g = make_genome(2, 1, hidden=[3], conns=[(0, 3, 1.0), (3, 2, 1.0)])
        pop = concat_population([g])
        state = SpeciesState((Species(1, g, (0,)),))
        cfg = NeatConfig(pop_size=3, genome_elitism=1)
        out = reproduce(pop, state, np.array([1.0]), cfg, RngKey(0), InnovationTable(4), spawn=[3])
        assert len(out) == 3
        assert out.genome(0).equals(g)
        for child in out.genomes():
            assert validate_genome(child, SCHEMA) == []

    def test_elitism_without_mutation_is_identity(self, rng):
        genomes = [random_genome(rng, num_inputs=2, num_outputs=1) for _ in range(6)]
        pop = concat_population(genomes)
        fitness = np.array([0.3, 0.9, 0.1, 0.5, 0.7, 0.2])
        state = SpeciesState((Species(1, genomes[0], tuple(range(6))),))
        cfg = NeatConfig(pop_size=6, genome_elitism=6, **FROZEN)
        out = reproduce(pop, state, fitness, cfg, RngKey(0), InnovationTable(100), spawn=[6])
        for slot, index in enumerate(np.argsort(-fitness, kind="stable")):
            assert out.genome(slot).equals(genomes[index])

    def test_frozen_offspring_copy_parents(self):
        g = make_genome(2, 1, hidden=[3], conns=[(0, 3, 1.0), (3, 2, 1.0)])
        pop = concat_population([g, g])
        state = SpeciesState((Species(1, g, (0, 1)),))
        cfg = NeatConfig(pop_size=4, genome_elitism=0, **FROZEN)
        out = reproduce(pop, state, np.array([1.0, 0.0]), cfg, RngKey(1), InnovationTable(4), spawn=[4])
        assert all(child.equals(g) for child in out.genomes())

    def test_generations_stay_valid(self):
        cfg = NeatConfig(pop_size=30, node_add=0.5, conn_add=0.8, node_delete=0.1, conn_delete=0.1,
                         max_nodes=12, max_conns=20, activation_options=["tanh", "relu", "sin"],
                         aggregation_options=["sum", "max", "product"], activation_replace_rate=0.2,
                         aggregation_replace_rate=0.2)
        problem = XorProblem()
        key = RngKey(4)
        pop = initialize_population(cfg, key, 3, 1, "sigmoid")
        innovations = InnovationTable(5)
        state = SpeciesState()
        for generation in range(6):
            fitness = evaluate_population(problem, pop, key.split(generation), generation)
            state = speciate(pop, state, fitness, cfg)
            state = update_stagnation(state, fitness, cfg)
            innovations.new_generation()
            pop = reproduce(pop, state, fitness, cfg, key.split(generation), innovations)
            assert len(pop) == cfg.pop_size
            for g in pop.genomes():
                assert validate_genome(g, SCHEMA) == []


class TestEvaluate:

    def test_non_finite_fitness_names_the_genome(self):
        pop = initialize_population(NeatConfig(pop_size=5), RngKey(0), 2, 1)
        with pytest.raises(EvaluationError) as exc_info:
            evaluate_population(ConstantProblem(bad_index=3), pop, RngKey(0), 7)
        assert (exc_info.value.generation, exc_info.value.index) == (7, 3)

    @pytest.mark.parametrize("pure, expected", [(True, 4), (False, 1)])
    def test_stateful_problems_run_on_one_thread(self, pure, expected):
        problem = ConstantProblem()
        problem.pure = pure
        pop = initialize_population(NeatConfig(pop_size=5), RngKey(0), 2, 1)
        evaluate_population(problem, pop, RngKey(0), 0, workers=4)
        assert problem.workers_seen == [expected]


class TestEvolve:

    def test_runs_generation_limit(self):
        cfg = NeatConfig(pop_size=20, generation_limit=5)
        _, stats = evolve(XorProblem(), cfg, RngKey(0))
        assert [g.generation for g in stats.generations] == [0, 1, 2, 3, 4]
        assert all(sum(g.species_sizes) == 20 for g in stats.generations)

    def test_stops_at_fitness_target(self):
        cfg = NeatConfig(pop_size=10, generation_limit=50, fitness_target=1.0)
        _, stats = evolve(ConstantProblem(1.0), cfg, RngKey(0))
        assert len(stats.generations) == 1

    def test_constant_fitness_returns_first_genome(self):
        cfg = NeatConfig(pop_size=10, generation_limit=1)
        best, _ = evolve(ConstantProblem(1.0), cfg, RngKey(3))
        initial = initialize_population(cfg, RngKey(3).split(INIT_STREAM), 2, 1, "identity")
        assert best.equals(initial.genome(0))

    def test_same_seed_same_run(self):
        cfg = NeatConfig(pop_size=30, generation_limit=4)
        best_a, stats_a = evolve(XorProblem(), cfg, RngKey(42))
        best_b, stats_b = evolve(XorProblem(), cfg, RngKey(42))
        assert _stats_without_time(stats_a) == _stats_without_time(stats_b)
        assert export_service.save_genome(best_a) == export_service.save_genome(best_b)

    def test_thread_count_does_not_change_results(self):
        cfg = NeatConfig(problem="cartpole", pop_size=24, generation_limit=3, max_steps=100)
        best_1, stats_1 = evolve(CartPoleProblem(max_steps=100), cfg, RngKey(5), workers=1)
        best_4, stats_4 = evolve(CartPoleProblem(max_steps=100), cfg, RngKey(5), workers=4)
        assert _stats_without_time(stats_1) == _stats_without_time(stats_4)
        assert best_1.equals(best_4)

    def test_on_generation_callback(self):
        seen = []
        evolve(XorProblem(), NeatConfig(pop_size=10, generation_limit=3), RngKey(0), on_generation=seen.append)
        assert [g.generation for g in seen] == [0, 1, 2]

    def test_unknown_activation_option(self):
        cfg = NeatConfig(pop_size=10, activation_options=["tanh", "swish"])
        with pytest.raises(UnknownFunction):
            evolve(XorProblem(), cfg, RngKey(0))


@pytest.mark.slow
class TestDeskScale:
    """Convergence and timing targets on the shipped experiment configs."""

    def test_xor_converges_for_most_seeds(self):
        cfg = load_config(str(CONFIG_DIR / "xor.toml"))
        assert (cfg.pop_size, cfg.generation_limit) == (150, 300)
        solved = 0
        for seed in range(10):
            _, stats = evolve(problem_service.create(cfg), cfg, RngKey(seed), workers=THREADS)
            solved += stats.best_fitness >= 3.9
        assert solved >= 8

    def test_cartpole_balances(self):
        cfg = load_config(str(CONFIG_DIR / "cartpole.toml"))
        assert (cfg.pop_size, cfg.generation_limit, cfg.max_steps) == (500, 100, 500)
        best = [evolve(problem_service.create(cfg), cfg, RngKey(seed), workers=THREADS)[1].best_fitness
                for seed in range(10)]
        assert np.median(best) >= 450

    def test_generation_time_is_stable(self):
        cfg = load_config(str(CONFIG_DIR / "xor.toml"), ["generation_limit=100", "fitness_target=inf"])
        _, stats = evolve(problem_service.create(cfg), cfg, RngKey(0), workers=1)
        assert len(stats.generations) == 100
        # the final generation skips reproduction
        elapsed = [g.elapsed_ms for g in stats.generations[10:-1]]
        assert max(elapsed) < 3 * min(elapsed)
