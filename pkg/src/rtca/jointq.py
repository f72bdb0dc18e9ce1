"""On-policy (Sarsa) joint action-value network trained from rollouts of a
frozen team. It scores ``(global state, joint action)`` and is the objective
the victim search minimises."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .ctde import AgentPolicy, CtdeTeam, greedy_joint_action
from .envs import Env, JointAction
from .errors import CheckpointError, ConfigurationError, DivergenceError, UsageError

log = logging.getLogger(__name__)


@dataclass
class JointQNet:
    spec: dc.MlpSpec
    params: dc.ParamSet
    n_agents: int
    actions_per_agent: int
    state_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.state_dim + self.n_agents * self.actions_per_agent
        if self.spec.input_size != expected or self.spec.output_size != 1:
            raise ConfigurationError(
                f"joint-Q net must map {expected} inputs to 1 output, got {self.spec.layer_sizes}"
            )

    @classmethod
    def create(cls, state_dim: int, n_agents: int, actions_per_agent: int,
               hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None,
               meta: dict | None = None) -> "JointQNet":
        spec = dc.MlpSpec((state_dim + n_agents * actions_per_agent, *hidden, 1))
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(spec, dc.init_params(spec, rng), n_agents, actions_per_agent, state_dim, meta or {})

    def with_params(self, params: dc.ParamSet) -> "JointQNet":
        return JointQNet(self.spec, params, self.n_agents, self.actions_per_agent, self.state_dim,
                         dict(self.meta))

    def encode(self, states: np.ndarray, joint_actions: np.ndarray) -> np.ndarray:
        """Concatenate each state with one-hot encodings of every agent's action."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        acts = np.atleast_2d(np.asarray(joint_actions, dtype=np.int64))
        if acts.shape[1] != self.n_agents:
            raise UsageError(f"joint action needs {self.n_agents} entries, got {acts.shape[1]}")
        if acts.min(initial=0) < 0 or acts.max(initial=0) >= self.actions_per_agent:
            raise UsageError(f"action index outside [0, {self.actions_per_agent})")
        if states.shape[1] != self.state_dim:
            raise ConfigurationError(f"state has {states.shape[1]} dims, expected {self.state_dim}")
        if len(states) == 1 and len(acts) > 1:
            states = np.repeat(states, len(acts), axis=0)
        onehot = np.zeros((len(acts), self.n_agents * self.actions_per_agent))
        cols = acts + np.arange(self.n_agents)[None, :] * self.actions_per_agent
        onehot[np.arange(len(acts))[:, None], cols] = 1.0
        return np.concatenate([states, onehot], axis=1)

    def values(self, state: np.ndarray, joint_actions: np.ndarray) -> np.ndarray:
        """``Q(s, a)`` for one state and a ``(P, N)`` batch of joint actions."""
        return dc.forward(self.spec, self.params, self.encode(state, joint_actions))[:, 0]

    def save(self, path: str | Path) -> None:
        meta = {**self.meta, "n_agents": self.n_agents, "actions_per_agent": self.actions_per_agent,
                "state_dim": self.state_dim}
        dc.save_checkpoint(self.spec, self.params, path, meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "JointQNet":
        doc = dc.read_checkpoint_document(path)
        spec, params = dc.from_document(doc)
        meta = dict(doc.get("meta", {}))
        try:
            n = meta.pop("n_agents")
            a = meta.pop("actions_per_agent")
            s = meta.pop("state_dim")
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing field 'meta.{exc.args[0]}'") from exc
        return cls(spec, params, n, a, s, meta)


def predict_qjt(net: JointQNet, state: np.ndarray, joint_action: Sequence[int]) -> float:
    return float(net.values(state, np.asarray(joint_action)[None, :])[0])


@dataclass
class SarsaTransition:
    s: np.ndarray
    a: JointAction
    r: float
    s_next: np.ndarray
    a_next: JointAction
    done: bool


class SarsaBuffer:
    """Bounded FIFO of transitions; sampling needs at least ``batch_size`` items."""

    def __init__(self, capacity: int, batch_size: int):
        if capacity < 1 or batch_size < 1:
            raise ConfigurationError("capacity and batch size must be positive")
        self.capacity = capacity
        self.batch_size = batch_size
        self._items: deque[SarsaTransition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, tr: SarsaTransition) -> None:
        self._items.append(tr)

    def ready(self) -> bool:
        return len(self._items) >= self.batch_size

    def sample(self, rng: np.random.Generator) -> list[SarsaTransition]:
        if not self.ready():
            raise UsageError(f"buffer holds {len(self)} transitions, need {self.batch_size}")
        idx = rng.integers(0, len(self._items), size=self.batch_size)
        return [self._items[i] for i in idx]


def epsilon_greedy_joint(policies: Sequence[AgentPolicy], histories: Sequence[np.ndarray],
                         epsilon: float, rng: np.random.Generator,
                         alive: np.ndarray | None = None) -> JointAction:
    """Each alive agent independently explores uniformly with probability epsilon."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    greedy = greedy_joint_action(policies, histories, alive)
    acts = []
    for i, (pi, g) in enumerate(zip(policies, greedy)):
        if alive is not None and not alive[i]:
            acts.append(0)
        elif epsilon > 0.0 and rng.random() < epsilon:
            acts.append(int(rng.integers(pi.n_actions)))
        else:
            acts.append(g)
    return tuple(acts)


def _batch_arrays(batch: Sequence[SarsaTransition]):
    s = np.stack([t.s for t in batch])
    a = np.array([t.a for t in batch], dtype=np.int64)
    r = np.array([t.r for t in batch], dtype=np.float64)
    s2 = np.stack([t.s_next for t in batch])
    a2 = np.array([t.a_next for t in batch], dtype=np.int64)
    done = np.array([t.done for t in batch], dtype=np.float64)
    return s, a, r, s2, a2, done


def sarsa_loss(net: JointQNet, batch: Sequence[SarsaTransition], gamma: float,
               target_params: dc.ParamSet | None = None) -> tuple[float, dc.ParamSet]:
    """Mean squared Sarsa residual and its semi-gradient.

    The bootstrap term ``r + gamma * Q(s', a') * (1 - done)`` is computed with
    ``target_params`` (defaults to the current parameters) and held constant.
    """
    if not batch:
        raise UsageError("sarsa_loss needs a non-empty batch")
    s, a, r, s2, a2, done = _batch_arrays(batch)
    x = net.encode(s, a)
    q = dc.forward(net.spec, net.params, x)[:, 0]
    tp = net.params if target_params is None else target_params
    q_next = dc.forward(net.spec, tp, net.encode(s2, a2))[:, 0]
    target = r + gamma * q_next * (1.0 - done)
    resid = q - target
    loss = float(np.mean(resid ** 2))
    up = (2.0 * resid / len(batch))[:, None]
    grads = dc.backward(net.spec, net.params, x, up).param_grads
    return loss, grads


@dataclass
class SarsaConfig:
    steps: int = 20000
    epsilon: float = 0.3
    lr: float = 0.01
    lr_final: float | None = 0.001
    gamma: float | None = None
    batch_size: int = 32
    capacity: int = 20000
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float | None = 10.0
    log_every: int = 2000

    @classmethod
    def from_dict(cls, doc: dict) -> "SarsaConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown jointq keys: {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def train_sarsa(env: Env, team: CtdeTeam, config: SarsaConfig | None = None, seed: int = 0) -> JointQNet:
    """Collect epsilon-greedy rollouts of the frozen team and fit the joint
    action-value network to the Sarsa target after every environment step."""
    config = config or SarsaConfig()
    spec = env.spec
    gamma = spec.gamma if config.gamma is None else config.gamma
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    net = JointQNet.create(spec.state_dim, spec.n_agents, spec.actions_per_agent, config.hidden,
                           rng=np.random.default_rng(np.random.SeedSequence([seed, 4])),
                           meta={"env_fingerprint": env.fingerprint(),
                                 "policy_fingerprint": team.policy_fingerprint(),
                                 "policy_algo": team.algo, "seed": seed,
                                 "sarsa_config": config.to_dict()})
    if config.steps <= 0:
        return net
    buffer = SarsaBuffer(config.capacity, config.batch_size)
    params = net.params
    episode = 0
    pending: tuple | None = None
    losses: list[float] = []

    def start():
        nonlocal episode
        s, obs = env.reset(int(np.random.SeedSequence([seed, 5, episode]).generate_state(1)[0]))
        episode += 1
        hists = team.new_histories()
        for h, o in zip(hists, obs):
            h.push(o)
        return s, hists

    state, hists = start()
    for t in range(config.steps):
        alive = env.alive_mask()
        hv = [h.vector() if alive[i] else np.zeros(h.obs_dim * h.length) for i, h in enumerate(hists)]
        a = epsilon_greedy_joint(team.policies, hv, config.epsilon, rng, alive)
        if pending is not None:
            ps, pa, pr = pending
            buffer.push(SarsaTransition(ps, pa, pr, state, a, False))
        out = env.step(a)
        for h, o in zip(hists, out.next_obs):
            h.push(o)
        if out.done:
            buffer.push(SarsaTransition(state, a, out.reward, out.next_state, a, True))
            pending = None
            state, hists = start()
        else:
            pending = (state, a, out.reward)
            state = out.next_state

        if buffer.ready():
            frac = t / max(1, config.steps - 1)
            lr = config.lr if config.lr_final is None else config.lr + frac * (config.lr_final - config.lr)
            loss, grads = sarsa_loss(net.with_params(params), buffer.sample(rng), gamma)
            if not math.isfinite(loss):
                raise DivergenceError(f"Sarsa loss became {loss} at step {t}")
            params = dc.sgd_step(params, dc.clip_by_global_norm(grads, config.grad_clip), lr)
            losses.append(loss)
            if config.log_every and (t + 1) % config.log_every == 0:
                log.info("sarsa step %d: loss %.4f", t + 1, float(np.mean(losses[-config.log_every:])))
    return net.with_params(params)
