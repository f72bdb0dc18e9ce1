"""Value-factorised team training: per-agent utilities mixed by VDN (sum) or a
QMIX-style monotone hypernetwork mixer, trained with a TD loss on the team
reward and executed greedily per agent."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .envs import Env, EnvSpec, JointAction, enumerate_joint_actions, fingerprint
from .errors import CheckpointError, ConfigurationError, DivergenceError

log = logging.getLogger(__name__)

ALGOS = ("vdn", "qmix")


class ObservationHistory:
    """The last ``length`` observations of one agent, oldest first, zero-filled."""

    def __init__(self, obs_dim: int, length: int = 1):
        self.obs_dim = obs_dim
        self.length = length
        self._buf = deque([np.zeros(obs_dim) for _ in range(length)], maxlen=length)

    def push(self, obs: np.ndarray) -> None:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,):
            raise ConfigurationError(f"observation shape {obs.shape} != ({self.obs_dim},)")
        self._buf.append(obs.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate(list(self._buf))


@dataclass
class AgentPolicy:
    spec: dc.MlpSpec
    params: dc.ParamSet
    obs_dim: int
    history_len: int = 1

    def __post_init__(self):
        if self.spec.input_size != self.obs_dim * self.history_len:
            raise ConfigurationError("policy input size must equal obs_dim * history_len")
        dc.check_params(self.spec, self.params)

    @property
    def n_actions(self) -> int:
        return self.spec.output_size

    def q_values(self, history: np.ndarray) -> np.ndarray:
        return dc.forward(self.spec, self.params, history)

    def greedy(self, history: np.ndarray) -> int:
        return int(np.argmax(self.q_values(history)))

    def new_history(self) -> ObservationHistory:
        return ObservationHistory(self.obs_dim, self.history_len)

    def with_params(self, params: dc.ParamSet) -> "AgentPolicy":
        return AgentPolicy(self.spec, params, self.obs_dim, self.history_len)


def greedy_joint_action(policies: Sequence[AgentPolicy], histories: Sequence[np.ndarray],
                        alive: np.ndarray | None = None) -> JointAction:
    """Per-agent argmax (``np.argmax`` returns the lowest index on ties).
    Dead agents are forced to action 0 (no-op)."""
    if len(policies) != len(histories):
        raise ConfigurationError("one history per agent is required")
    acts = []
    for i, (pi, h) in enumerate(zip(policies, histories)):
        if alive is not None and not alive[i]:
            acts.append(0)
        else:
            acts.append(pi.greedy(h))
    return tuple(acts)


# -- mixers ----------------------------------------------------------------

def mix_vdn(per_agent_q: Sequence[float]) -> float:
    return math.fsum(float(q) for q in per_agent_q)


class VdnMixer:
    kind = "vdn"

    def forward(self, states: np.ndarray, qs: np.ndarray) -> np.ndarray:
        return qs.sum(axis=-1)

    def backward(self, states, qs, upstream):
        return {}, np.repeat(np.asarray(upstream)[:, None], qs.shape[1], axis=1)

    @property
    def params(self) -> dict:
        return {}

    def with_params(self, params) -> "VdnMixer":
        return self

    def to_document(self) -> dict:
        return {"type": "vdn"}


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


class QmixMixer:
    """Two-layer monotone mixer whose weights are produced from the global
    state by four hypernetworks; mixing weights pass through ``abs``."""

    kind = "qmix"
    HEADS = ("w1", "b1", "w2", "b2")

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32, hyper_hidden: int = 32,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.hyper_hidden = hyper_hidden
        outs = {"w1": n_agents * embed, "b1": embed, "w2": embed, "b2": 1}
        self.specs = {h: dc.MlpSpec((state_dim, hyper_hidden, outs[h])) for h in self.HEADS}
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {h: dc.init_params(self.specs[h], rng) for h in self.HEADS}
            # nonzero biases: with an all-zero state the abs() on zero weights has no gradient
            for h in self.HEADS:
                for name, arr in params[h].items():
                    if name.startswith("b"):
                        arr[...] = rng.uniform(0.05, 0.2, size=arr.shape)
        for h in self.HEADS:
            dc.check_params(self.specs[h], params[h])
        self.params = params

    def with_params(self, params: dict) -> "QmixMixer":
        return QmixMixer(self.n_agents, self.state_dim, self.embed, self.hyper_hidden, params=params)

    def _check(self, states, qs):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
        if states.shape[1] != self.state_dim or qs.shape[1] != self.n_agents or len(states) != len(qs):
            raise ConfigurationError(
                f"mixer expects states (B, {self.state_dim}) and qs (B, {self.n_agents}), "
                f"got {states.shape} and {qs.shape}"
            )
        return states, qs

    def _trace(self, states, qs):
        raw = {h: dc.forward(self.specs[h], self.params[h], states) for h in self.HEADS}
        B = len(states)
        w1 = np.abs(raw["w1"]).reshape(B, self.n_agents, self.embed)
        pre = np.einsum("bn,bne->be", qs, w1) + raw["b1"]
        hid = _elu(pre)
        w2 = np.abs(raw["w2"])
        out = (hid * w2).sum(axis=1) + raw["b2"][:, 0]
        return out, (raw, w1, pre, hid, w2)

    def forward(self, states: np.ndarray, qs: np.ndarray) -> np.ndarray:
        states, qs = self._check(states, qs)
        return self._trace(states, qs)[0]

    def backward(self, states, qs, upstream):
        """Return (per-head parameter gradients, dL/dqs) for ``upstream = dL/dout``."""
        states, qs = self._check(states, qs)
        _, (raw, w1, pre, hid, w2) = self._trace(states, qs)
        g = np.asarray(upstream, dtype=np.float64)
        B = len(states)
        d_w2 = g[:, None] * hid * np.sign(raw["w2"])
        d_b2 = g[:, None]
        d_pre = g[:, None] * w2 * _elu_grad(pre)
        d_b1 = d_pre
        d_qs = np.einsum("be,bne->bn", d_pre, w1)
        d_w1 = (qs[:, :, None] * d_pre[:, None, :]).reshape(B, -1) * np.sign(raw["w1"])
        heads_up = {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}
        grads = {h: dc.backward(self.specs[h], self.params[h], states, heads_up[h]).param_grads
                 for h in self.HEADS}
        return grads, d_qs

    def to_document(self) -> dict:
        return {
            "type": "qmix",
            "n_agents": self.n_agents,
            "state_dim": self.state_dim,
            "embed": self.embed,
            "hyper_hidden": self.hyper_hidden,
            "hypernets": {h: dc.to_document(self.specs[h], self.params[h]) for h in self.HEADS},
        }


def mix_qmix(mixer: QmixMixer, state: np.ndarray, per_agent_q: Sequence[float]) -> float:
    return float(mixer.forward(np.asarray(state)[None, :], np.asarray(per_agent_q, dtype=np.float64)[None, :])[0])


def mixer_from_document(doc: dict):
    kind = doc.get("type")
    if kind == "vdn":
        return VdnMixer()
    if kind == "qmix":
        try:
            params = {h: dc.from_document(doc["hypernets"][h])[1] for h in QmixMixer.HEADS}
            return QmixMixer(doc["n_agents"], doc["state_dim"], doc["embed"], doc["hyper_hidden"],
                             params=params)
        except (KeyError, ConfigurationError) as exc:
            raise CheckpointError(f"invalid mixer document: {exc}") from exc
    raise CheckpointError(f"invalid field 'type': unknown mixer {kind!r}")


def make_mixer(algo: str, spec: EnvSpec, rng: np.random.Generator, embed: int = 32,
               hyper_hidden: int = 32):
    if algo == "vdn":
        return VdnMixer()
    if algo == "qmix":
        return QmixMixer(spec.n_agents, spec.state_dim, embed, hyper_hidden, rng=rng)
    raise ConfigurationError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")


# -- IGM -------------------------------------------------------------------

@dataclass
class IgmReport:
    holds: bool
    joint_argmax: JointAction
    per_agent_argmax: JointAction
    joint_max: float


def igm_check(per_agent_q: Sequence[np.ndarray], qjt: Callable[[JointAction], float],
              spec: EnvSpec, cap: int | None = None) -> IgmReport:
    """Compare the exhaustive argmax of ``qjt`` with the tuple of per-agent
    argmaxes. Ties resolve to the lexicographically first joint action."""
    kwargs = {} if cap is None else {"cap": cap}
    best, best_a = -np.inf, None
    for a in enumerate_joint_actions(spec, **kwargs):
        v = qjt(a)
        if v > best:
            best, best_a = v, a
    local = tuple(int(np.argmax(q)) for q in per_agent_q)
    return IgmReport(best_a == local, best_a, local, float(best))


# -- team checkpoints --------------------------------------------------------

@dataclass
class TrainConfig:
    episodes: int = 1500
    lr: float = 0.01
    lr_final: float | None = None
    gamma: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    history_len: int = 1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_episodes: int = 700
    target_update_interval: int = 500
    buffer_capacity: int = 20000
    batch_size: int = 32
    train_every: int = 1
    grad_clip: float | None = 10.0
    double_q: bool = True
    mixer_embed: int = 32
    mixer_hyper_hidden: int = 32
    log_every: int = 100

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class CtdeTeam:
    """Trained agent utilities plus the mixer they were trained with."""

    algo: str
    env_spec: EnvSpec
    env_fingerprint: str
    policies: list[AgentPolicy]
    mixer: VdnMixer | QmixMixer
    seed: int = 0
    train_config: dict = field(default_factory=dict)
    curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.policies) != self.env_spec.n_agents:
            raise ConfigurationError("agent count does not match the environment")
        for p in self.policies:
            if p.n_actions != self.env_spec.actions_per_agent or p.obs_dim != self.env_spec.obs_dim:
                raise ConfigurationError("policy shape does not match the environment")

    @property
    def n_agents(self) -> int:
        return len(self.policies)

    @property
    def history_len(self) -> int:
        return self.policies[0].history_len

    def new_histories(self) -> list[ObservationHistory]:
        return [p.new_history() for p in self.policies]

    def q_table(self, histories: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([p.q_values(h) for p, h in zip(self.policies, histories)])

    def critic_values(self, state, histories, joint_actions: np.ndarray) -> np.ndarray:
        """Centralised ``Q_jt(s, a)`` for a batch of joint actions."""
        q = self.q_table(histories)
        joint_actions = np.atleast_2d(joint_actions)
        chosen = q[np.arange(self.n_agents)[None, :], joint_actions]
        states = np.repeat(np.asarray(state)[None, :], len(joint_actions), axis=0)
        return self.mixer.forward(states, chosen)

    def policy_fingerprint(self) -> str:
        return fingerprint({"algo": self.algo,
                            "agents": [dc.to_document(p.spec, p.params) for p in self.policies]})

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(self.policies):
            dc.save_checkpoint(p.spec, p.params, d / f"agent_{i}.json",
                               meta={"obs_dim": p.obs_dim, "history_len": p.history_len})
        (d / "mixer.json").write_text(json.dumps(self.mixer.to_document()))
        meta = {
            "algo": self.algo,
            "env_spec": asdict(self.env_spec),
            "env_fingerprint": self.env_fingerprint,
            "seed": self.seed,
            "train_config": self.train_config,
            "curve": self.curve,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "CtdeTeam":
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
            spec = EnvSpec(**meta["env_spec"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{d / 'meta.json'}: {exc}") from exc
        policies = []
        for i in range(spec.n_agents):
            path = d / f"agent_{i}.json"
            doc = dc.read_checkpoint_document(path)
            net_spec, params = dc.from_document(doc)
            extra = doc.get("meta", {})
            policies.append(AgentPolicy(net_spec, params, extra.get("obs_dim", spec.obs_dim),
                                        extra.get("history_len", 1)))
        mixer = mixer_from_document(json.loads((d / "mixer.json").read_text()))
        return cls(meta["algo"], spec, meta["env_fingerprint"], policies, mixer,
                   meta.get("seed", 0), meta.get("train_config", {}), meta.get("curve", []))


# -- TD training -------------------------------------------------------------

@dataclass
class TdBatch:
    hist: np.ndarray        # (B, N, H)
    actions: np.ndarray     # (B, N) int
    reward: np.ndarray      # (B,)
    next_hist: np.ndarray   # (B, N, H)
    done: np.ndarray        # (B,) float
    state: np.ndarray       # (B, S)
    next_state: np.ndarray  # (B, S)
    next_alive: np.ndarray  # (B, N) bool


class _TdReplay:
    def __init__(self, capacity, n_agents, hist_dim, state_dim):
        self.capacity = capacity
        self.size = 0
        self.pos = 0
        self.hist = np.zeros((capacity, n_agents, hist_dim))
        self.next_hist = np.zeros((capacity, n_agents, hist_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.state = np.zeros((capacity, state_dim))
        self.next_state = np.zeros((capacity, state_dim))
        self.next_alive = np.zeros((capacity, n_agents), dtype=bool)

    def push(self, hist, actions, reward, next_hist, done, state, next_state, next_alive):
        i = self.pos
        self.hist[i], self.next_hist[i] = hist, next_hist
        self.actions[i], self.reward[i], self.done[i] = actions, reward, float(done)
        self.state[i], self.next_state[i], self.next_alive[i] = state, next_state, next_alive
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, batch_size) -> TdBatch:
        idx = rng.integers(0, self.size, size=batch_size)
        return TdBatch(self.hist[idx], self.actions[idx], self.reward[idx], self.next_hist[idx],
                       self.done[idx], self.state[idx], self.next_state[idx], self.next_alive[idx])


def td_loss(policies: Sequence[AgentPolicy], mixer, target_policies: Sequence[AgentPolicy],
            target_mixer, batch: TdBatch, gamma: float, double_q: bool = True):
    """Mean squared TD error of the mixed team value.

    Returns ``(loss, agent_grads, mixer_grads)``. The bootstrap target is a
    constant computed by the target networks; with ``double_q`` the next
    action is picked by the online networks and scored by the target ones.
    """
    B, N = batch.actions.shape
    rows = np.arange(B)
    chosen = np.empty((B, N))
    next_best = np.empty((B, N))
    for i in range(N):
        q = dc.forward(policies[i].spec, policies[i].params, batch.hist[:, i])
        chosen[:, i] = q[rows, batch.actions[:, i]]
        qn = dc.forward(target_policies[i].spec, target_policies[i].params, batch.next_hist[:, i])
        if double_q:
            pick = dc.forward(policies[i].spec, policies[i].params, batch.next_hist[:, i]).argmax(axis=1)
        else:
            pick = qn.argmax(axis=1)
        pick = np.where(batch.next_alive[:, i], pick, 0)
        next_best[:, i] = qn[rows, pick]
    q_tot = mixer.forward(batch.state, chosen)
    target = batch.reward + gamma * (1.0 - batch.done) * target_mixer.forward(batch.next_state, next_best)
    resid = q_tot - target
    loss = float(np.mean(resid ** 2))
    mixer_grads, d_chosen = mixer.backward(batch.state, chosen, 2.0 * resid / B)
    agent_grads = []
    for i in range(N):
        up = np.zeros((B, policies[i].n_actions))
        up[rows, batch.actions[:, i]] = d_chosen[:, i]
        agent_grads.append(dc.backward(policies[i].spec, policies[i].params, batch.hist[:, i], up).param_grads)
    return loss, agent_grads, mixer_grads


def init_team(env: Env, algo: str, config: TrainConfig, seed: int) -> CtdeTeam:
    spec = env.spec
    rng = np.random.default_rng(seed)
    net_spec = dc.MlpSpec((spec.obs_dim * config.history_len, *config.hidden, spec.actions_per_agent))
    policies = [AgentPolicy(net_spec, dc.init_params(net_spec, rng), spec.obs_dim, config.history_len)
                for _ in range(spec.n_agents)]
    mixer = make_mixer(algo, spec, rng, config.mixer_embed, config.mixer_hyper_hidden)
    return CtdeTeam(algo, spec, env.fingerprint(), policies, mixer, seed, config.to_dict())


def _lr_at(config: TrainConfig, episode: int) -> float:
    if config.lr_final is None or config.episodes <= 1:
        return config.lr
    frac = min(1.0, episode / (config.episodes - 1))
    return config.lr + frac * (config.lr_final - config.lr)


def _masked_history(h: ObservationHistory, alive: bool) -> np.ndarray:
    v = h.vector()
    return v if alive else np.zeros_like(v)


def td_train(env: Env, algo: str, config: TrainConfig | None = None, seed: int = 0) -> CtdeTeam:
    """Train a VDN or QMIX team with epsilon-greedy rollouts and a replay buffer."""
    config = config or TrainConfig()
    if algo not in ALGOS:
        raise ConfigurationError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
    team = init_team(env, algo, config, seed)
    if config.episodes <= 0:
        return team
    spec = env.spec
    gamma = spec.gamma if config.gamma is None else config.gamma
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    ep_seeds = np.random.SeedSequence([seed, 2])
    N = spec.n_agents
    hist_dim = spec.obs_dim * config.history_len
    replay = _TdReplay(config.buffer_capacity, N, hist_dim, spec.state_dim)

    policies = list(team.policies)
    mixer = team.mixer
    target_policies = [p.with_params(dc.copy_params(p.params)) for p in policies]
    target_mixer = mixer.with_params({h: dc.copy_params(v) for h, v in mixer.params.items()})
    updates = 0
    returns: list[float] = []
    curve: list[float] = []
    step_count = 0

    for ep, child in enumerate(ep_seeds.spawn(config.episodes)):
        frac = min(1.0, ep / max(1, config.eps_anneal_episodes))
        eps = config.eps_start + frac * (config.eps_end - config.eps_start)
        lr = _lr_at(config, ep)
        state, obs = env.reset(int(child.generate_state(1)[0]))
        hists = [p.new_history() for p in policies]
        for h, o in zip(hists, obs):
            h.push(o)
        alive = env.alive_mask().copy()
        ep_return, done = 0.0, False
        while not done:
            hv = np.stack([_masked_history(h, alive[i]) for i, h in enumerate(hists)])
            acts = []
            for i in range(N):
                if not alive[i]:
                    acts.append(0)
                elif rng.random() < eps:
                    acts.append(int(rng.integers(spec.actions_per_agent)))
                else:
                    acts.append(policies[i].greedy(hv[i]))
            out = env.step(acts)
            for h, o in zip(hists, out.next_obs):
                h.push(o)
            next_alive = env.alive_mask().copy()
            nhv = np.stack([_masked_history(h, next_alive[i]) for i, h in enumerate(hists)])
            replay.push(hv, acts, out.reward, nhv, out.done, state, out.next_state, next_alive)
            state, alive, done = out.next_state, next_alive, out.done
            ep_return += out.reward
            step_count += 1

            if replay.size >= config.batch_size and step_count % config.train_every == 0:
                batch = replay.sample(rng, config.batch_size)
                loss, agent_grads, mixer_grads = td_loss(policies, mixer, target_policies,
                                                         target_mixer, batch, gamma, config.double_q)
                if not math.isfinite(loss):
                    raise DivergenceError(f"TD loss became {loss} at episode {ep}, update {updates}")
                flat = {f"a{i}.{k}": g for i, ag in enumerate(agent_grads) for k, g in ag.items()}
                flat.update({f"m.{h}.{k}": g for h, mg in mixer_grads.items() for k, g in mg.items()})
                flat = dc.clip_by_global_norm(flat, config.grad_clip)
                policies = [p.with_params(dc.sgd_step(p.params, {k: flat[f"a{i}.{k}"] for k in p.params}, lr))
                            for i, p in enumerate(policies)]
                if mixer.params:
                    mixer = mixer.with_params({
                        h: dc.sgd_step(mp, {k: flat[f"m.{h}.{k}"] for k in mp}, lr)
                        for h, mp in mixer.params.items()
                    })
                updates += 1
                if updates % config.target_update_interval == 0:
                    target_policies = [p.with_params(dc.copy_params(p.params)) for p in policies]
                    target_mixer = mixer.with_params({h: dc.copy_params(v) for h, v in mixer.params.items()})

        returns.append(ep_return)
        if (ep + 1) % config.log_every == 0:
            block = float(np.mean(returns[-config.log_every:]))
            curve.append(block)
            log.info("%s episode %d: mean return %.3f (eps %.3f)", algo, ep + 1, block, eps)

    team.policies = policies
    team.mixer = mixer
    team.curve = curve
    return team
