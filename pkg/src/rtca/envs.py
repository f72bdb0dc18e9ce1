"""Toy Dec-POMDPs: a one-shot cooperative matrix game, a two-step chain, and
a grid pursuit game shaped like SMAC (bounded feature observations, move /
attack / stop / no-op actions, shared shaped reward capped at 20 per episode).
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

DEFAULT_ENUMERATION_CAP = 65536

JointAction = tuple[int, ...]


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    actions_per_agent: int
    obs_dim: int
    state_dim: int
    obs_low: float = 0.0
    obs_high: float = 1.0
    gamma: float = 0.99
    max_steps: int = 1

    def __post_init__(self):
        for name in ("n_agents", "actions_per_agent", "obs_dim", "state_dim", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not self.obs_low < self.obs_high:
            raise ConfigurationError("observation range needs low < high")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")

    @property
    def obs_range(self) -> tuple[float, float]:
        return (self.obs_low, self.obs_high)


@dataclass
class StepOutcome:
    next_state: np.ndarray
    next_obs: list[np.ndarray]
    reward: float
    done: bool
    win: bool


def fingerprint(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def check_joint_action(spec: EnvSpec, actions: Sequence[int]) -> JointAction:
    actions = tuple(int(a) for a in actions)
    if len(actions) != spec.n_agents:
        raise UsageError(f"expected {spec.n_agents} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        if not 0 <= a < spec.actions_per_agent:
            raise UsageError(f"agent {i} action {a} outside [0, {spec.actions_per_agent})")
    return actions


def enumerate_joint_actions(spec: EnvSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[JointAction]:
    total = spec.actions_per_agent ** spec.n_agents
    if total > cap:
        raise ConfigurationError(
            f"{total} joint actions exceed the enumeration cap of {cap}"
        )
    return itertools.product(range(spec.actions_per_agent), repeat=spec.n_agents)


class Env:
    """Common surface: ``reset(seed)``, ``step(actions)``, ``alive_mask()``."""

    name = "env"
    spec: EnvSpec

    def __init__(self):
        self._done = True

    def config(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return fingerprint(self.config())

    def alive_mask(self) -> np.ndarray:
        return np.ones(self.spec.n_agents, dtype=bool)

    @property
    def done(self) -> bool:
        return self._done

    def _require_running(self):
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")


class CoopMatrixGame(Env):
    """One-step game: every agent sees the same constant observation and the
    team receives ``payoff[a1, ..., aN]``."""

    name = "matrix"

    def __init__(self, payoff, obs_dim: int = 2, obs_fill: float = 0.5, state_dim: int = 1,
                 gamma: float = 0.99):
        super().__init__()
        payoff = np.asarray(payoff, dtype=np.float64)
        if payoff.ndim < 1 or len(set(payoff.shape)) != 1:
            raise ConfigurationError(f"payoff must be a hypercube, got shape {payoff.shape}")
        if not np.all(np.isfinite(payoff)):
            raise ConfigurationError("payoff contains non-finite entries")
        self.payoff = payoff
        self.obs_fill = float(obs_fill)
        self.spec = EnvSpec(
            n_agents=payoff.ndim,
            actions_per_agent=payoff.shape[0],
            obs_dim=obs_dim,
            state_dim=state_dim,
            gamma=gamma,
            max_steps=1,
        )
        if not self.spec.obs_low <= self.obs_fill <= self.spec.obs_high:
            raise ConfigurationError("obs_fill must lie inside the observation range")

    @classmethod
    def from_json(cls, source: str | Path, **kwargs) -> "CoopMatrixGame":
        text = str(source)
        if not text.lstrip().startswith("["):
            text = Path(source).read_text()
        return cls(json.loads(text), **kwargs)

    def config(self) -> dict:
        return {
            "name": self.name,
            "payoff": self.payoff.tolist(),
            "obs_dim": self.spec.obs_dim,
            "obs_fill": self.obs_fill,
            "state_dim": self.spec.state_dim,
            "gamma": self.spec.gamma,
        }

    def _obs(self):
        return [np.full(self.spec.obs_dim, self.obs_fill) for _ in range(self.spec.n_agents)]

    def reset(self, seed: int | None = None):
        self._done = False
        return np.zeros(self.spec.state_dim), self._obs()

    def step(self, actions) -> StepOutcome:
        self._require_running()
        actions = check_joint_action(self.spec, actions)
        self._done = True
        return StepOutcome(np.zeros(self.spec.state_dim), self._obs(),
                           float(self.payoff[actions]), True, False)


class ChainGame(Env):
    """Deterministic chain of ``len(rewards)`` steps. The state is a one-hot of
    the step index; ``rewards[t]`` is a payoff hypercube for step ``t``."""

    name = "chain"

    def __init__(self, rewards, gamma: float = 0.9):
        super().__init__()
        self.rewards = [np.asarray(r, dtype=np.float64) for r in rewards]
        shapes = {r.shape for r in self.rewards}
        if len(shapes) != 1:
            raise ConfigurationError("all steps need the same payoff shape")
        shape = shapes.pop()
        self.length = len(self.rewards)
        self.spec = EnvSpec(
            n_agents=len(shape),
            actions_per_agent=shape[0],
            obs_dim=self.length,
            state_dim=self.length,
            gamma=gamma,
            max_steps=self.length,
        )
        self.t = 0

    def config(self) -> dict:
        return {"name": self.name, "rewards": [r.tolist() for r in self.rewards],
                "gamma": self.spec.gamma}

    def _state(self):
        s = np.zeros(self.length)
        if self.t < self.length:
            s[self.t] = 1.0
        return s

    def reset(self, seed: int | None = None):
        self.t = 0
        self._done = False
        s = self._state()
        return s, [s.copy() for _ in range(self.spec.n_agents)]

    def step(self, actions) -> StepOutcome:
        self._require_running()
        actions = check_joint_action(self.spec, actions)
        r = float(self.rewards[self.t][actions])
        self.t += 1
        done = self.t >= self.length
        self._done = done
        s = self._state()
        return StepOutcome(s, [s.copy() for _ in range(self.spec.n_agents)], r, done, False)


# -- grid pursuit ----------------------------------------------------------

NOOP, STOP, NORTH, SOUTH, EAST, WEST, ATTACK = range(7)
ACTION_NAMES = ("no-op", "stop", "north", "south", "east", "west", "attack")
_MOVES = {NORTH: (0, 1), SOUTH: (0, -1), EAST: (1, 0), WEST: (-1, 0)}
# prey candidates; ties go to the lowest cell index (y * K + x)
_PREY_MOVES = ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0))


@dataclass(frozen=True)
class GridCaptureConfig:
    grid_size: int = 4
    n_agents: int = 3
    view_radius: int = 3
    attack_range: int = 1
    prey_hp: int = 6
    hunter_hp: int = 3
    prey_bite: int = 1
    prey_move_period: int = 3
    max_steps: int = 25
    damage_weight: float = 1.0
    win_bonus: float = 10.0
    time_penalty: float = 0.02
    max_reward: float = 20.0
    gamma: float = 0.99

    def __post_init__(self):
        if self.grid_size < 2 or self.n_agents < 1 or self.prey_hp < 1 or self.hunter_hp < 1:
            raise ConfigurationError("grid_size >= 2, n_agents, prey_hp and hunter_hp >= 1 required")
        if self.view_radius < 1 or self.attack_range < 0 or self.prey_move_period < 1:
            raise ConfigurationError("invalid view_radius / attack_range / prey_move_period")
        if self.damage_weight < 0 or self.win_bonus < 0 or self.time_penalty < 0:
            raise ConfigurationError("reward weights must be non-negative")
        if self.damage_weight * self.prey_hp + self.win_bonus <= 0:
            raise ConfigurationError("reward weights leave nothing to normalize")


class GridCapture(Env):
    """N hunters chase a scripted fleeing prey on a K x K grid.

    Actions follow SMAC's layout: 0 no-op (dead agents only), 1 stop,
    2-5 move north/south/east/west, 6 attack the prey if within
    ``attack_range`` (Manhattan). Each step the prey bites the lowest-index
    alive hunter in range; it flees every ``prey_move_period`` steps to the
    neighbouring cell maximising its minimum distance to alive hunters.

    Team reward per step is ``scale * (damage_weight * damage + win_bonus * win)
    - time_penalty`` with ``scale`` chosen so that a full kill pays exactly
    ``max_reward``.

    Observation of hunter i (all components in [0, 1]), zeros if dead:
    own x, own y, own hp, prey-in-attack-range flag, then one 5-feature slot
    for the prey and for each teammate in index order:
    visible, distance, relative x, relative y, health.
    """

    name = "grid_capture"
    n_actions = len(ACTION_NAMES)
    slot_size = 5

    def __init__(self, config: GridCaptureConfig | None = None, **overrides):
        super().__init__()
        if config is None:
            config = GridCaptureConfig(**overrides)
        elif overrides:
            config = GridCaptureConfig(**{**asdict(config), **overrides})
        self.cfg = config
        c = config
        self.scale = c.max_reward / (c.damage_weight * c.prey_hp + c.win_bonus)
        obs_dim = 4 + self.slot_size * c.n_agents
        self.spec = EnvSpec(
            n_agents=c.n_agents,
            actions_per_agent=self.n_actions,
            obs_dim=obs_dim,
            state_dim=3 * c.n_agents + 4,
            gamma=c.gamma,
            max_steps=c.max_steps,
        )
        self.hunter_pos = np.zeros((c.n_agents, 2), dtype=np.int64)
        self.hunter_hp = np.zeros(c.n_agents, dtype=np.int64)
        self.prey_pos = np.zeros(2, dtype=np.int64)
        self.prey_hp = 0
        self.t = 0

    def config(self) -> dict:
        return {"name": self.name, **asdict(self.cfg)}

    def alive_mask(self) -> np.ndarray:
        return self.hunter_hp > 0

    # -- dynamics ----------------------------------------------------------

    def reset(self, seed: int | None = None):
        c = self.cfg
        rng = np.random.default_rng(seed)
        k = c.grid_size
        cells = rng.choice(k * k, size=c.n_agents, replace=False)
        self.hunter_pos = np.stack([cells % k, cells // k], axis=1).astype(np.int64)
        self.hunter_hp = np.full(c.n_agents, c.hunter_hp, dtype=np.int64)
        far = [cell for cell in range(k * k)
               if self._min_dist(np.array([cell % k, cell // k])) >= 2]
        pool = far or [cell for cell in range(k * k) if cell not in set(cells.tolist())]
        cell = int(pool[rng.integers(len(pool))])
        self.prey_pos = np.array([cell % k, cell // k], dtype=np.int64)
        self.prey_hp = c.prey_hp
        self.t = 0
        self._done = False
        return self.state(), self.observations()

    def _min_dist(self, cell, alive=None) -> int:
        pos = self.hunter_pos if alive is None else self.hunter_pos[alive]
        if len(pos) == 0:
            return 10 ** 6
        return int(np.abs(pos - cell).sum(axis=1).min())

    def _clamp(self, p):
        return np.clip(p, 0, self.cfg.grid_size - 1)

    def step(self, actions) -> StepOutcome:
        self._require_running()
        c = self.cfg
        actions = check_joint_action(self.spec, actions)
        alive = self.alive_mask()

        # attacks resolve on start-of-step positions, then hunters move
        damage = 0
        for i, a in enumerate(actions):
            if not alive[i]:
                continue
            if a == ATTACK and np.abs(self.hunter_pos[i] - self.prey_pos).sum() <= c.attack_range:
                damage += 1
        for i, a in enumerate(actions):
            if alive[i] and a in _MOVES:
                self.hunter_pos[i] = self._clamp(self.hunter_pos[i] + _MOVES[a])

        damage = min(damage, self.prey_hp)
        self.prey_hp -= damage
        win = self.prey_hp <= 0
        reward = self.scale * (c.damage_weight * damage + (c.win_bonus if win else 0.0)) - c.time_penalty

        if not win:
            in_range = [i for i in range(c.n_agents)
                        if alive[i] and np.abs(self.hunter_pos[i] - self.prey_pos).sum() <= c.attack_range]
            if in_range and c.prey_bite > 0:
                self.hunter_hp[in_range[0]] = max(0, self.hunter_hp[in_range[0]] - c.prey_bite)
            if (self.t + 1) % c.prey_move_period == 0:
                self._prey_flee()

        self.t += 1
        wiped = not self.alive_mask().any()
        done = bool(win or wiped or self.t >= c.max_steps)
        self._done = done
        return StepOutcome(self.state(), self.observations(), float(reward), done, bool(win))

    def _prey_flee(self):
        alive = self.alive_mask()
        k = self.cfg.grid_size
        best_key, best = None, self.prey_pos
        for d in _PREY_MOVES:
            cell = self._clamp(self.prey_pos + d)
            key = (-self._min_dist(cell, alive), int(cell[1] * k + cell[0]))
            if best_key is None or key < best_key:
                best_key, best = key, cell
        self.prey_pos = best.astype(np.int64)

    # -- features ----------------------------------------------------------

    def state(self) -> np.ndarray:
        c = self.cfg
        span = c.grid_size - 1
        parts = []
        for i in range(c.n_agents):
            parts += [self.hunter_pos[i, 0] / span, self.hunter_pos[i, 1] / span,
                      self.hunter_hp[i] / c.hunter_hp]
        parts += [self.prey_pos[0] / span, self.prey_pos[1] / span,
                  self.prey_hp / c.prey_hp, self.t / c.max_steps]
        return np.asarray(parts, dtype=np.float64)

    def _slot(self, origin, target, health):
        r = self.cfg.view_radius
        d = target - origin
        if np.abs(d).max() > r:
            return [0.0] * self.slot_size
        dist = float(np.hypot(d[0], d[1])) / (r * np.sqrt(2.0))
        return [1.0, dist, (d[0] / r + 1.0) / 2.0, (d[1] / r + 1.0) / 2.0, health]

    def observations(self) -> list[np.ndarray]:
        c = self.cfg
        span = c.grid_size - 1
        alive = self.alive_mask()
        out = []
        for i in range(c.n_agents):
            if not alive[i]:
                out.append(np.zeros(self.spec.obs_dim))
                continue
            me = self.hunter_pos[i]
            in_range = float(self.prey_hp > 0 and np.abs(me - self.prey_pos).sum() <= c.attack_range)
            feats = [me[0] / span, me[1] / span, self.hunter_hp[i] / c.hunter_hp, in_range]
            feats += self._slot(me, self.prey_pos, self.prey_hp / c.prey_hp)
            for j in range(c.n_agents):
                if j == i:
                    continue
                if alive[j]:
                    feats += self._slot(me, self.hunter_pos[j], self.hunter_hp[j] / c.hunter_hp)
                else:
                    feats += [0.0] * self.slot_size
            out.append(np.asarray(feats, dtype=np.float64))
        return out


def make_env(config: dict) -> Env:
    """Build an environment from the ``env`` section of a run config."""
    cfg = dict(config)
    name = cfg.pop("name", GridCapture.name)
    if name == GridCapture.name:
        known = set(GridCaptureConfig.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ConfigurationError(f"unknown grid_capture keys: {sorted(unknown)}")
        return GridCapture(GridCaptureConfig(**cfg))
    if name == CoopMatrixGame.name:
        payoff = cfg.pop("payoff")
        if isinstance(payoff, str):
            return CoopMatrixGame.from_json(payoff, **cfg)
        return CoopMatrixGame(payoff, **cfg)
    if name == ChainGame.name:
        return ChainGame(cfg.pop("rewards"), **cfg)
    raise ConfigurationError(f"unknown environment {name!r}")
