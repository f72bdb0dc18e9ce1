"""Attack rollouts, seeded evaluation, the objective ablation, the
transferability run, and report tables/files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctde import CtdeTeam, TrainConfig, greedy_joint_action
from .deselect import DeConfig, de_run, qjt_objective
from .envs import Env, fingerprint, make_env
from .errors import ConfigurationError
from .jointq import JointQNet, SarsaConfig
from .perturb import METHODS, AttackBudget, attack_random, attack_targeted, attack_untargeted

log = logging.getLogger(__name__)

OBJECTIVE_SOURCES = ("sarsa_qjt", "centralized_critic")
CSV_COLUMNS = ("env", "method", "algo", "M", "episodes", "win_rate", "reward_mean",
               "reward_std", "seed_set", "config_hash")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    env: dict = field(default_factory=lambda: {"name": "grid_capture"})
    algo: str = "qmix"
    ctde_checkpoint: str | None = None
    ctde_seed: int = 0
    ctde_train: TrainConfig = field(default_factory=TrainConfig)
    jointq_checkpoint: str | None = None
    jointq_seed: int = 0
    jointq_train: SarsaConfig = field(default_factory=SarsaConfig)
    de: DeConfig = field(default_factory=DeConfig)
    epsilon: float = 0.1
    alpha: float | None = None
    attack_steps: int = 1
    method: str = "rtca"
    episodes: int = 32
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    objective_source: str = "sarsa_qjt"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes < 1:
            raise ConfigurationError("eval.episodes must be at least 1")
        if not self.seeds:
            raise ConfigurationError("eval.seeds must not be empty")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown attack.method {self.method!r}; expected one of {METHODS}")
        if self.objective_source not in OBJECTIVE_SOURCES:
            raise ConfigurationError(f"unknown eval.objective_source {self.objective_source!r}")

    @property
    def M(self) -> int:
        return self.de.M

    def budget(self, env: Env) -> AttackBudget:
        lo, hi = env.spec.obs_range
        return AttackBudget(self.epsilon, self.alpha, self.attack_steps, lo, hi)

    def to_dict(self) -> dict:
        return {
            "env": dict(self.env),
            "ctde": {"algo": self.algo, "checkpoint": self.ctde_checkpoint, "seed": self.ctde_seed,
                     "train": self.ctde_train.to_dict()},
            "jointq": {"checkpoint": self.jointq_checkpoint, "seed": self.jointq_seed,
                       "train": self.jointq_train.to_dict()},
            "de": {k: v for k, v in asdict(self.de).items() if k != "seed"},
            "attack": {"epsilon": self.epsilon, "alpha": self.alpha, "steps": self.attack_steps,
                       "method": self.method},
            "eval": {"episodes": self.episodes, "seeds": list(self.seeds),
                     "objective_source": self.objective_source},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"env", "ctde", "jointq", "de", "attack", "eval"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        ctde = dict(doc.get("ctde", {}))
        jq = dict(doc.get("jointq", {}))
        attack = dict(doc.get("attack", {}))
        ev = dict(doc.get("eval", {}))
        de = dict(doc.get("de", {}))
        for section, d, keys in (("ctde", ctde, {"algo", "checkpoint", "seed", "train"}),
                                 ("jointq", jq, {"checkpoint", "seed", "train"}),
                                 ("attack", attack, {"epsilon", "alpha", "steps", "method"}),
                                 ("eval", ev, {"episodes", "seeds", "objective_source"}),
                                 ("de", de, set(DeConfig.__dataclass_fields__) - {"seed"})):
            extra = set(d) - keys
            if extra:
                raise ConfigurationError(f"unknown keys in '{section}': {sorted(extra)}")
        return cls(
            env=dict(doc.get("env", {"name": "grid_capture"})),
            algo=ctde.get("algo", "qmix"),
            ctde_checkpoint=ctde.get("checkpoint"),
            ctde_seed=ctde.get("seed", 0),
            ctde_train=TrainConfig.from_dict(ctde.get("train", {})),
            jointq_checkpoint=jq.get("checkpoint"),
            jointq_seed=jq.get("seed", 0),
            jointq_train=SarsaConfig.from_dict(jq.get("train", {})),
            de=DeConfig(**de),
            epsilon=attack.get("epsilon", 0.1),
            alpha=attack.get("alpha"),
            attack_steps=attack.get("steps", 1),
            method=attack.get("method", "rtca"),
            episodes=ev.get("episodes", 32),
            seeds=tuple(ev.get("seeds", DEFAULT_SEEDS)),
            objective_source=ev.get("objective_source", "sarsa_qjt"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


# -- rollouts ------------------------------------------------------------------

@dataclass
class StepLog:
    victims: list[int]
    targets: list[int]
    induced: list[int]
    hits: list[bool]


@dataclass
class EpisodeResult:
    win: bool
    cumulative_reward: float
    steps: int
    attack_log: list[StepLog] = field(default_factory=list)
    actions: list[tuple[int, ...]] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for a, r in zip(self.actions, self.rewards):
            h.update(struct.pack(f"<{len(a)}q", *a))
            h.update(struct.pack("<d", r))
        return h.hexdigest()


def _child_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


def _check_components(env: Env, team: CtdeTeam, qnet: JointQNet | None):
    fp = env.fingerprint()
    if team.env_fingerprint != fp:
        raise ConfigurationError(
            f"team was trained on environment {team.env_fingerprint}, evaluating on {fp}"
        )
    if qnet is not None:
        if qnet.meta.get("env_fingerprint", fp) != fp:
            raise ConfigurationError(
                f"joint-Q net was trained on environment {qnet.meta.get('env_fingerprint')}, "
                f"evaluating on {fp}"
            )
        if (qnet.n_agents, qnet.actions_per_agent, qnet.state_dim) != (
                env.spec.n_agents, env.spec.actions_per_agent, env.spec.state_dim):
            raise ConfigurationError("joint-Q net shape does not match the environment")


def run_episode(env: Env, team: CtdeTeam, seed: int, method: str = "none", M: int = 0,
                budget: AttackBudget | None = None, qnet: JointQNet | None = None,
                de_config: DeConfig | None = None, objective_source: str = "sarsa_qjt") -> EpisodeResult:
    """Roll out one episode with the given attack applied at every step.

    ``rtca`` picks victims and target actions by differential evolution on the
    joint-Q network (or the team's own mixer when ``objective_source`` is
    ``centralized_critic``) and drives each victim there with targeted FGSM.
    ``random`` and ``fgsm_untargeted`` draw ``M`` alive victims uniformly each
    step. Victims act on the perturbed observation, everyone else on the
    clean one; the environment state is never touched.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    budget = budget or AttackBudget(clip_low=env.spec.obs_low, clip_high=env.spec.obs_high)
    de_config = de_config or DeConfig(M=M)
    if method == "rtca" and M > 0 and objective_source == "sarsa_qjt" and qnet is None:
        raise ConfigurationError("rtca with the sarsa_qjt objective needs a joint-Q network")
    if method == "rtca" and objective_source == "centralized_critic" and team.mixer is None:
        raise ConfigurationError("centralized_critic objective needs the team's mixer")
    _check_components(env, team, qnet if method == "rtca" else None)

    attack_rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    state, obs = env.reset(seed)
    hists = team.new_histories()
    for h, o in zip(hists, obs):
        h.push(o)
    result = EpisodeResult(False, 0.0, 0)
    done = False
    t = 0
    while not done:
        alive = env.alive_mask().copy()
        hv = [h.vector() if alive[i] else np.zeros(h.obs_dim * h.length) for i, h in enumerate(hists)]
        clean = greedy_joint_action(team.policies, hv, alive)
        acts = list(clean)
        step_log = StepLog([], [], [], [])
        n_alive = int(alive.sum())
        m = min(M, n_alive)
        if method != "none" and m > 0:
            if method == "rtca":
                if objective_source == "sarsa_qjt":
                    objective = qjt_objective(qnet, state)
                else:
                    objective = lambda joint, s=state, h=hv: team.critic_values(s, h, joint)
                cfg = replace(de_config, M=m, seed=_child_seed(seed, 11, t))
                res = de_run(objective, clean, cfg, env.spec.actions_per_agent, alive)
                for v in res.victims:
                    target = res.worst_actions[v]
                    out = attack_targeted(team.policies[v], hv[v], target, budget)
                    acts[v] = out.induced_action
                    step_log.victims.append(v)
                    step_log.targets.append(target)
                    step_log.induced.append(out.induced_action)
                    step_log.hits.append(out.target_hit)
            else:
                victims = sorted(attack_rng.choice(np.flatnonzero(alive), size=m, replace=False).tolist())
                for v in victims:
                    pol = team.policies[v]
                    if method == "random":
                        adv = attack_random(hv[v], budget, attack_rng, pol.obs_dim)
                        induced = pol.greedy(adv)
                    else:
                        induced = attack_untargeted(pol, hv[v], budget).induced_action
                    acts[v] = induced
                    step_log.victims.append(int(v))
                    step_log.targets.append(-1)
                    step_log.induced.append(induced)
                    step_log.hits.append(induced != clean[v])
        out = env.step(acts)
        for h, o in zip(hists, out.next_obs):
            h.push(o)
        result.actions.append(tuple(int(a) for a in acts))
        result.rewards.append(out.reward)
        result.attack_log.append(step_log)
        result.cumulative_reward += out.reward
        state, done = out.next_state, out.done
        result.win = out.win
        t += 1
    result.steps = t
    return result


def run_rtca_episode(env: Env, team: CtdeTeam, qnet_or_critic: JointQNet | None, de_config: DeConfig,
                     budget: AttackBudget, seed: int) -> EpisodeResult:
    """RTCA rollout; pass ``None`` to use the team's own mixer as the objective."""
    source = "sarsa_qjt" if qnet_or_critic is not None else "centralized_critic"
    return run_episode(env, team, seed, "rtca", de_config.M, budget, qnet_or_critic, de_config, source)


# -- evaluation ------------------------------------------------------------------

@dataclass
class Report:
    env: str
    method: str
    algo: str
    M: int
    episodes: int
    win_rate: float
    reward_mean: float
    reward_std: float
    seeds: list[int]
    config_hash: str
    rewards: list[float] = field(default_factory=list, repr=False)
    wins: list[bool] = field(default_factory=list, repr=False)
    labels: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Sequence[EpisodeResult], *, env: str, method: str, algo: str,
                     M: int, seeds: Sequence[int], config_hash: str, labels: dict | None = None) -> "Report":
        rewards = [r.cumulative_reward for r in results]
        wins = [bool(r.win) for r in results]
        return cls(env, method, algo, M, len(results), sum(wins) / len(results),
                   float(np.mean(rewards)), float(np.std(rewards)), list(seeds), config_hash,
                   rewards, wins, dict(labels or {}))

    def reward_cell(self) -> str:
        return format_reward(self.reward_mean, self.reward_std)

    def record(self) -> dict:
        return {
            "env": self.env,
            "method": self.method,
            "algo": self.algo,
            "M": self.M,
            "episodes": self.episodes,
            "win_rate": f"{self.win_rate:.2f}",
            "reward_mean": f"{self.reward_mean:.2f}",
            "reward_std": f"{self.reward_std:.2f}",
            "seed_set": ";".join(str(s) for s in self.seeds),
            "config_hash": self.config_hash,
        }


def format_reward(mean: float, std: float) -> str:
    """Table style: ``19.74±1.45``, or just ``20.00`` when the spread rounds to zero."""
    if round(std, 2) == 0:
        return f"{mean:.2f}"
    return f"{mean:.2f}±{std:.2f}"


def load_team(config: RunConfig, algo: str | None = None) -> CtdeTeam:
    if not config.ctde_checkpoint:
        raise ConfigurationError("ctde.checkpoint is not set")
    path = Path(config.ctde_checkpoint)
    if not path.is_dir():
        raise ConfigurationError(f"team checkpoint {path} does not exist")
    return CtdeTeam.load(path)


def load_qnet(config: RunConfig) -> JointQNet:
    if not config.jointq_checkpoint:
        raise ConfigurationError("jointq.checkpoint is not set")
    path = Path(config.jointq_checkpoint)
    if not path.is_file():
        raise ConfigurationError(f"joint-Q checkpoint {path} does not exist")
    return JointQNet.load(path)


def evaluate(config: RunConfig, team: CtdeTeam | None = None, qnet: JointQNet | None = None,
             env: Env | None = None, method_label: str | None = None,
             labels: dict | None = None) -> Report:
    """``episodes`` seeded rollouts per evaluation seed, reduced in (seed, episode) order."""
    env = env or make_env(config.env)
    team = team or load_team(config)
    needs_qnet = config.method == "rtca" and config.M > 0 and config.objective_source == "sarsa_qjt"
    if needs_qnet and qnet is None:
        qnet = load_qnet(config)
    _check_components(env, team, qnet if needs_qnet else None)
    budget = config.budget(env)
    results = []
    for s in config.seeds:
        for e in range(config.episodes):
            ep_seed = _child_seed(s, e)
            try:
                results.append(run_episode(env, team, ep_seed, config.method, config.M, budget,
                                           qnet, config.de, config.objective_source))
            except Exception as exc:
                raise type(exc)(f"episode {e} of seed {s}: {exc}") from exc
    method = method_label or config.method
    rep = Report.from_results(results, env=env.name, method=method, algo=team.algo, M=config.M,
                              seeds=config.seeds, config_hash=config.fingerprint(), labels=labels)
    log.info("%s M=%d on %s: WR %.2f reward %s", method, config.M, team.algo, rep.win_rate, rep.reward_cell())
    return rep


def ablation_objective(config: RunConfig, team: CtdeTeam | None = None,
                       qnet: JointQNet | None = None, env: Env | None = None) -> tuple[Report, Report]:
    """Same RTCA evaluation twice: DE driven by the team's own mixer, then by
    the Sarsa joint-Q network."""
    team = team or load_team(config)
    if team.mixer is None:
        raise ConfigurationError("ablation needs the team's centralised critic (mixer)")
    base = replace(config, method="rtca")
    critic_cfg = replace(base, objective_source="centralized_critic")
    sarsa_cfg = replace(base, objective_source="sarsa_qjt")
    critic = evaluate(critic_cfg, team, None, env, labels={"objective": "centralized_critic"})
    sarsa = evaluate(sarsa_cfg, team, qnet, env, labels={"objective": "sarsa_qjt"})
    return critic, sarsa


def transfer_experiment(config: RunConfig, qnet: JointQNet, victim_team: CtdeTeam,
                        env: Env | None = None) -> Report:
    """RTCA against ``victim_team`` using a joint-Q net sampled from another team."""
    source_fp = qnet.meta.get("policy_fingerprint", "unknown")
    victim_fp = victim_team.policy_fingerprint()
    if source_fp == victim_fp:
        warnings.warn("joint-Q net was trained on the victim team itself; this is not a transfer run",
                      stacklevel=2)
    cfg = replace(config, method="rtca", objective_source="sarsa_qjt")
    source_algo = qnet.meta.get("policy_algo", "unknown")
    return evaluate(cfg, victim_team, qnet, env,
                    labels={"qnet_source": source_algo, "qnet_fingerprint": source_fp,
                            "victim_fingerprint": victim_fp})


# -- tables and files -------------------------------------------------------------

def _grid(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


def results_table(reports: Sequence[Report]) -> str:
    """One row per (env, victim algo, M); a WR / Reward column pair per method."""
    methods = list(dict.fromkeys(r.method for r in reports))
    keys = list(dict.fromkeys((r.env, r.algo, r.M) for r in reports))
    header = ["Env", "Victim", "M"] + [f"{m} {c}" for m in methods for c in ("WR", "Reward")]
    rows = []
    for env, algo, M in keys:
        row = [env, algo.upper(), M]
        for m in methods:
            hit = [r for r in reports if (r.env, r.algo, r.M, r.method) == (env, algo, M, m)]
            row += [f"{hit[0].win_rate:.2f}", hit[0].reward_cell()] if hit else ["-", "-"]
        rows.append(row)
    return _grid(header, rows)


def ablation_table(pairs: Sequence[tuple[Report, Report]]) -> str:
    header = ["Env", "Victim", "VDN/QMIX WR", "VDN/QMIX Reward", "Q~jt WR", "Q~jt Reward", "M"]
    rows = [[c.env, c.algo.upper(), f"{c.win_rate:.2f}", c.reward_cell(),
             f"{s.win_rate:.2f}", s.reward_cell(), c.M] for c, s in pairs]
    return _grid(header, rows)


def transfer_table(reports: Sequence[Report]) -> str:
    """Rows: victim algo and M; columns: which team's rollouts trained the joint-Q net."""
    sources = sorted({r.labels.get("qnet_source", "?") for r in reports}, reverse=True)
    keys = list(dict.fromkeys((r.env, r.algo, r.M) for r in reports))
    header = ["Env", "Victim"] + [f"Q~jt({s.upper()}) {c}" for s in sources for c in ("WR", "Reward")] + ["M"]
    rows = []
    for env, algo, M in keys:
        row = [env, algo.upper()]
        for s in sources:
            hit = [r for r in reports
                   if (r.env, r.algo, r.M) == (env, algo, M) and r.labels.get("qnet_source") == s]
            row += [f"{hit[0].win_rate:.2f}", hit[0].reward_cell()] if hit else ["-", "-"]
        rows.append(row + [M])
    return _grid(header, rows)


def write_report(reports: Sequence[Report | dict], path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "csv"
    records = [r.record() if isinstance(r, Report) else {k: r[k] for k in CSV_COLUMNS} for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(records, indent=1)
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    if path.suffix == ".json":
        records = json.loads(text)
    else:
        records = list(csv.DictReader(io.StringIO(text)))
    for r in records:
        r["M"] = int(r["M"])
        r["episodes"] = int(r["episodes"])
    return records
