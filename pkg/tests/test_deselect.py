import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtca.deselect import (DeConfig, crossover, de_run, decode, decode_population, fitness,
                           initial_population, mutate, overwrite)
from rtca.errors import ConfigurationError, UsageError


def table_objective(payoff):
    return lambda joint: payoff[tuple(np.asarray(joint).T)]


def brute_force(payoff, base, M):
    """Exhaustive minimum over victim sets of size M and their actions."""
    best = np.inf
    n, a = payoff.ndim, payoff.shape[0]
    for victims in itertools.combinations(range(n), M):
        for acts in itertools.product(range(a), repeat=M):
            joint = list(base)
            for v, x in zip(victims, acts):
                joint[v] = x
            best = min(best, payoff[tuple(joint)])
    return best


def test_decode_rounds_half_up_and_clamps():
    assert decode([0.5, 2.49], 4, 4) == ([1], [2])
    assert decode([-3.0, 9.0], 4, 4) == ([0], [3])


def test_decode_repairs_duplicates():
    victims, actions = decode([1.2, 0.9, 0.0, 3.0], 4, 4)
    assert victims == [1, 2] and actions == [0, 3]
    victims, _ = decode([3.0, 3.0, 3.0, 0, 0, 0], 4, 2)
    assert victims == [3, 0, 1]


def test_decode_uses_alive_pool():
    alive = np.array([False, True, False, True])
    victims, _ = decode([0.0, 1.0, 0, 0], 4, 3, alive)
    assert victims == [1, 3]
    victims, actions = decode([0.0, 1.0, 0, 2], 4, 3, np.array([False, False, True, False]))
    assert victims == [2] and actions == [0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 10), min_size=6, max_size=6))
def test_decoded_victims_are_distinct_and_in_range(genome):
    victims, actions = decode(genome, 4, 5)
    assert len(set(victims)) == 3 and all(0 <= v < 4 for v in victims)
    assert all(0 <= a < 5 for a in actions)


def test_overwrite_and_fitness():
    payoff = np.arange(16.0).reshape(4, 4)
    assert overwrite((1, 1), [0], [3]).tolist() == [[3, 1]]
    assert fitness(table_objective(payoff), (1, 1), [1], [2]) == payoff[1, 2]
    with pytest.raises(UsageError):
        fitness(table_objective(payoff), (1, 1), [0, 0], [1, 2])


def test_mutate_uses_three_distinct_others():
    pop = np.diag([1.0, 10.0, 100.0, 1000.0])
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = mutate(pop, 0, 1.0, rng)
        assert m[0] == 0.0
        assert sorted(np.abs(m[1:]).tolist()) == [10.0, 100.0, 1000.0]


def test_crossover_keeps_one_mutant_gene():
    rng = np.random.default_rng(1)
    for _ in range(50):
        child = crossover(np.zeros(6), np.ones(6), 0.0, rng)
        assert child.sum() == 1.0
    assert crossover(np.zeros(6), np.ones(6), 1.0, rng).sum() == 6.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DeConfig(population_size=3)
    with pytest.raises(ConfigurationError):
        DeConfig(CR=1.5)
    with pytest.raises(ConfigurationError):
        de_run(lambda j: np.zeros(len(j)), (0, 0), DeConfig(M=3), 2)


def test_zero_victims_returns_base_value():
    payoff = np.arange(16.0).reshape(4, 4)
    res = de_run(table_objective(payoff), (2, 3), DeConfig(M=0), 4)
    assert res.victims == [] and res.best_fitness == payoff[2, 3]


def test_best_fitness_never_increases():
    payoff = np.random.default_rng(2).normal(size=(4,) * 4)
    res = de_run(table_objective(payoff), (0, 1, 2, 3), DeConfig(population_size=20, T=15, M=2, seed=3), 4)
    assert all(b <= a for a, b in zip(res.best_history, res.best_history[1:]))
    assert res.best_fitness == fitness(table_objective(payoff), (0, 1, 2, 3), res.victims,
                                       [res.worst_actions[v] for v in res.victims])


def test_finds_exhaustive_minimum_on_small_game():
    rng = np.random.default_rng(4)
    payoff = rng.normal(size=(3, 3, 3))
    base = (0, 1, 2)
    res = de_run(table_objective(payoff), base, DeConfig(population_size=40, T=10, M=1, seed=0), 3)
    assert res.best_fitness == brute_force(payoff, base, 1)


def test_respects_initial_population():
    pop = initial_population(DeConfig(population_size=8, M=1), 4, 4, np.random.default_rng(0))
    assert pop.shape == (8, 2)
    with pytest.raises(ConfigurationError):
        de_run(lambda j: np.zeros(len(j)), (0, 0, 0, 0), DeConfig(population_size=8, M=1), 4,
               init_population=np.zeros((7, 2)))


def test_run_is_seed_deterministic():
    payoff = np.random.default_rng(5).normal(size=(4,) * 4)
    cfg = DeConfig(population_size=50, T=5, M=2, seed=11)
    a = de_run(table_objective(payoff), (0, 0, 0, 0), cfg, 4)
    b = de_run(table_objective(payoff), (0, 0, 0, 0), cfg, 4)
    assert a.victims == b.victims and a.worst_actions == b.worst_actions
