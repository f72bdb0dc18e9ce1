"""Differential evolution over (victim indices, victim actions).

A genome holds ``2M`` reals: the first ``M`` pick victims, the last ``M``
their forced actions. Objectives are callables mapping a ``(P, N)`` integer
array of joint actions to ``P`` values; the search minimises them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

Objective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DeConfig:
    population_size: int = 400
    F: float = 0.5
    CR: float = 0.9
    T: int = 20
    M: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 4:
            raise ConfigurationError("population_size must be at least 4")
        if not self.F > 0:
            raise ConfigurationError("F must be positive")
        if not 0.0 <= self.CR <= 1.0:
            raise ConfigurationError("CR must lie in [0, 1]")
        if self.T < 0 or self.M < 0:
            raise ConfigurationError("T and M must be non-negative")


@dataclass
class DeResult:
    victims: list[int]
    worst_actions: dict[int, int]
    best_fitness: float
    generations_run: int
    best_history: list[float] = field(default_factory=list)
    genome: np.ndarray | None = None


def _round(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def decode_population(genomes: np.ndarray, n_agents: int, actions_per_agent: int,
                      alive: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decode`; returns ``(victims, actions)`` each ``(P, M)``.

    Index genes are rounded half-up and clamped into the list of alive agents;
    a duplicate advances (wrapping) to the next unused slot. If fewer agents
    are alive than ``M``, only the first ``n_alive`` genes are used.
    """
    genomes = np.atleast_2d(np.asarray(genomes, dtype=np.float64))
    P, D = genomes.shape
    if D % 2:
        raise ConfigurationError(f"genome length must be even, got {D}")
    M = D // 2
    pool = np.arange(n_agents) if alive is None else np.flatnonzero(alive)
    n_pool = len(pool)
    m_eff = min(M, n_pool)
    slots = np.clip(_round(genomes[:, :m_eff]), 0, n_pool - 1) if n_pool else np.zeros((P, 0), np.int64)
    for m in range(1, m_eff):
        for _ in range(m):
            clash = (slots[:, :m] == slots[:, m:m + 1]).any(axis=1)
            if not clash.any():
                break
            slots[clash, m] = (slots[clash, m] + 1) % n_pool
    victims = pool[slots] if m_eff else np.zeros((P, 0), np.int64)
    actions = np.clip(_round(genomes[:, M:M + m_eff]), 0, actions_per_agent - 1)
    return victims, actions


def decode(genome: Sequence[float], n_agents: int, actions_per_agent: int,
           alive: np.ndarray | None = None) -> tuple[list[int], list[int]]:
    """Map one genome to ``(victims, actions)``; ``actions[k]`` belongs to ``victims[k]``."""
    v, a = decode_population(np.asarray(genome)[None, :], n_agents, actions_per_agent, alive)
    return v[0].tolist(), a[0].tolist()


def overwrite(base_joint_action: Sequence[int], victims: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Joint actions with the victims' entries replaced; ``victims`` may be ``(M,)`` or ``(P, M)``."""
    victims = np.atleast_2d(np.asarray(victims, dtype=np.int64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    joint = np.repeat(np.asarray(base_joint_action, dtype=np.int64)[None, :], len(victims), axis=0)
    if victims.shape[1]:
        joint[np.arange(len(victims))[:, None], victims] = actions
    return joint


def fitness(objective: Objective, base_joint_action: Sequence[int], victims: Sequence[int],
            actions: Sequence[int]) -> float:
    if len(set(victims)) != len(victims):
        raise UsageError(f"victim indices must be distinct, got {list(victims)}")
    if len(victims) != len(actions):
        raise UsageError("one action per victim is required")
    joint = overwrite(base_joint_action, np.asarray(victims, np.int64).reshape(1, -1),
                      np.asarray(actions, np.int64).reshape(1, -1))
    return float(objective(joint)[0])


def qjt_objective(net, state: np.ndarray) -> Objective:
    """Objective scoring joint actions with a joint-Q network at a fixed state."""
    return lambda joint: net.values(state, joint)


def _distinct_indices(rng: np.random.Generator, P: int, exclude: np.ndarray, k: int) -> np.ndarray:
    """For each row, draw ``k`` distinct indices in ``[0, P)`` avoiding ``exclude[row]``."""
    taken = np.asarray(exclude, dtype=np.int64).reshape(len(exclude), -1)
    out = []
    for _ in range(k):
        r = rng.integers(0, P - taken.shape[1], size=len(taken))
        for ex in np.sort(taken, axis=1).T:
            r = r + (r >= ex)
        out.append(r)
        taken = np.concatenate([taken, r[:, None]], axis=1)
    return np.stack(out, axis=1)


def _mutants(population: np.ndarray, F: float, rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    d = _distinct_indices(rng, len(population), rows[:, None], 3)
    return population[d[:, 0]] + F * (population[d[:, 1]] - population[d[:, 2]])


def mutate(population: np.ndarray, j: int, F: float, rng: np.random.Generator) -> np.ndarray:
    """``D[d1] + F * (D[d2] - D[d3])`` with ``d1, d2, d3`` distinct and different from ``j``."""
    population = np.asarray(population, dtype=np.float64)
    if len(population) < 4:
        raise ConfigurationError("mutation needs a population of at least 4")
    return _mutants(population, F, rng, np.array([j]))[0]


def _crossover_mask(rng: np.random.Generator, P: int, D: int, CR: float) -> np.ndarray:
    mask = rng.random((P, D)) < CR
    mask[np.arange(P), rng.integers(0, D, size=P)] = True
    return mask


def crossover(target: np.ndarray, mutant: np.ndarray, CR: float, rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover; one uniformly chosen gene always comes from the mutant."""
    target = np.asarray(target, dtype=np.float64)
    mutant = np.asarray(mutant, dtype=np.float64)
    if target.shape != mutant.shape:
        raise ConfigurationError("target and mutant must have the same length")
    mask = _crossover_mask(rng, 1, target.size, CR)[0]
    return np.where(mask, mutant, target)


def initial_population(config: DeConfig, n_candidates_idx: int, actions_per_agent: int,
                       rng: np.random.Generator) -> np.ndarray:
    P, M = config.population_size, config.M
    idx = rng.uniform(0, max(n_candidates_idx - 1, 0), size=(P, M))
    act = rng.uniform(0, actions_per_agent - 1, size=(P, M))
    return np.concatenate([idx, act], axis=1)


def de_run(objective: Objective, base_joint_action: Sequence[int], config: DeConfig,
           actions_per_agent: int, alive: np.ndarray | None = None,
           init_population: np.ndarray | None = None) -> DeResult:
    """Minimise ``objective`` over victim sets of size ``M`` and their actions.

    Synchronous DE/rand/1/bin: every generation builds all trials from the
    current population, scores them in one batch and keeps a trial only if it
    is strictly better than the member it challenges.
    """
    base = np.asarray(base_joint_action, dtype=np.int64)
    n_agents = len(base)
    if config.M > n_agents:
        raise ConfigurationError(f"M={config.M} exceeds the {n_agents} agents")
    if config.M == 0:
        value = float(objective(base[None, :])[0])
        return DeResult([], {}, value, 0, [value], np.zeros(0))

    rng = np.random.default_rng(config.seed)
    n_pool = n_agents if alive is None else int(np.count_nonzero(alive))

    def score(pop):
        victims, actions = decode_population(pop, n_agents, actions_per_agent, alive)
        return objective(overwrite(base, victims, actions))

    if init_population is not None:
        pop = np.array(init_population, dtype=np.float64)
        if pop.shape != (config.population_size, 2 * config.M):
            raise ConfigurationError(f"initial population must have shape "
                                     f"({config.population_size}, {2 * config.M})")
    else:
        pop = initial_population(config, n_pool, actions_per_agent, rng)
    fit = np.asarray(score(pop), dtype=np.float64)
    history = [float(fit.min())]
    rows = np.arange(len(pop))
    for _ in range(config.T):
        mutant = _mutants(pop, config.F, rng, rows)
        mask = _crossover_mask(rng, len(pop), pop.shape[1], config.CR)
        trial = np.where(mask, mutant, pop)
        trial_fit = np.asarray(score(trial), dtype=np.float64)
        better = trial_fit < fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]
        history.append(float(fit.min()))

    best = int(np.argmin(fit))
    victims, actions = decode(pop[best], n_agents, actions_per_agent, alive)
    order = np.argsort(victims)
    victims_sorted = [int(victims[k]) for k in order]
    worst = {int(victims[k]): int(actions[k]) for k in order}
    return DeResult(victims_sorted, worst, float(fit[best]), config.T, history, pop[best].copy())
