"""Bounded observation attacks on a single agent's policy network.

Only the newest observation inside an agent's history vector is perturbed.
Every result lies in the l-inf ball of radius ``epsilon`` around the clean
observation and inside the environment's observation range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ctde import AgentPolicy
from .errors import ConfigurationError

LOG_FLOOR = 1e-12
METHODS = ("rtca", "random", "fgsm_untargeted", "none")


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 0.1
    alpha: float | None = None
    steps: int = 1
    clip_low: float = 0.0
    clip_high: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1")
        if not self.clip_low < self.clip_high:
            raise ConfigurationError("clip range needs low < high")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / self.steps


@dataclass
class AttackOutcome:
    adversarial_obs: np.ndarray
    induced_action: int
    target_hit: bool


def clip_obs(x: np.ndarray, low: float, high: float) -> np.ndarray:
    return np.clip(x, low, high)


def project(x: np.ndarray, clean: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """Project onto the epsilon ball around ``clean``, then onto the value range."""
    x = np.clip(x, clean - budget.epsilon, clean + budget.epsilon)
    return clip_obs(x, budget.clip_low, budget.clip_high)


def _log_probs(q: np.ndarray) -> np.ndarray:
    return np.maximum(dc.log_softmax(q), np.log(LOG_FLOOR))


def _logit_grad_of_logp(q: np.ndarray, action: int) -> np.ndarray:
    """d log pi(action) / d logits, zero where the floor is active."""
    lp = dc.log_softmax(q)
    if lp[action] < np.log(LOG_FLOOR):
        return np.zeros_like(q)
    g = -np.exp(lp)
    g[action] += 1.0
    return g


def targeted_loss(policy: AgentPolicy, obs_hat: np.ndarray, target_action: int,
                  clean_action: int) -> tuple[float, np.ndarray]:
    """``-log pi(target | o) + log pi(clean | o)`` under a softmax over Q-values,
    with its gradient w.r.t. the policy input."""
    n = policy.n_actions
    if not (0 <= target_action < n and 0 <= clean_action < n):
        raise ConfigurationError("action index out of range")
    q = policy.q_values(obs_hat)
    if target_action == clean_action:
        return 0.0, np.zeros_like(np.asarray(obs_hat, dtype=np.float64))
    lp = _log_probs(q)
    loss = float(-lp[target_action] + lp[clean_action])
    g_logits = -_logit_grad_of_logp(q, target_action) + _logit_grad_of_logp(q, clean_action)
    grad = dc.backward(policy.spec, policy.params, obs_hat, g_logits).input_grad
    return loss, grad


def untargeted_loss(policy: AgentPolicy, obs_hat: np.ndarray, clean_action: int) -> tuple[float, np.ndarray]:
    """``-log pi(clean | o)`` and its input gradient; attacks ascend it."""
    q = policy.q_values(obs_hat)
    loss = float(-_log_probs(q)[clean_action])
    g_logits = -_logit_grad_of_logp(q, clean_action)
    grad = dc.backward(policy.spec, policy.params, obs_hat, g_logits).input_grad
    return loss, grad


def fgsm_step(obs_hat: np.ndarray, input_grad: np.ndarray, alpha: float, clean_obs: np.ndarray,
              budget: AttackBudget) -> np.ndarray:
    """One signed step that decreases the loss, then ball and range projection."""
    obs_hat = np.asarray(obs_hat, dtype=np.float64)
    if obs_hat.shape != np.shape(input_grad) or obs_hat.shape != np.shape(clean_obs):
        raise ConfigurationError("observation and gradient shapes differ")
    return project(obs_hat - alpha * np.sign(input_grad), np.asarray(clean_obs, dtype=np.float64), budget)


def _newest_mask(policy: AgentPolicy, size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    mask[size - policy.obs_dim:] = True
    return mask


def attack_targeted(policy: AgentPolicy, clean_history: np.ndarray, target_action: int,
                    budget: AttackBudget) -> AttackOutcome:
    """Iterated targeted FGSM pushing the victim toward ``target_action``."""
    clean = np.asarray(clean_history, dtype=np.float64)
    clean_action = policy.greedy(clean)
    x = clean.copy()
    if budget.epsilon > 0 and target_action != clean_action:
        mask = _newest_mask(policy, clean.size)
        for _ in range(budget.steps):
            _, grad = targeted_loss(policy, x, target_action, clean_action)
            x = fgsm_step(x, np.where(mask, grad, 0.0), budget.step_size, clean, budget)
    induced = policy.greedy(x)
    return AttackOutcome(x, induced, induced == target_action)


def attack_untargeted(policy: AgentPolicy, clean_history: np.ndarray, budget: AttackBudget) -> AttackOutcome:
    """Signed ascent on ``-log pi(clean action)`` (steps as configured)."""
    clean = np.asarray(clean_history, dtype=np.float64)
    clean_action = policy.greedy(clean)
    x = clean.copy()
    if budget.epsilon > 0:
        mask = _newest_mask(policy, clean.size)
        for _ in range(budget.steps):
            _, grad = untargeted_loss(policy, x, clean_action)
            # ascent on the loss == descent on its negation
            x = fgsm_step(x, -np.where(mask, grad, 0.0), budget.step_size, clean, budget)
    induced = policy.greedy(x)
    return AttackOutcome(x, induced, induced != clean_action)


def attack_random(clean_obs: np.ndarray, budget: AttackBudget, rng: np.random.Generator,
                  obs_dim: int | None = None) -> np.ndarray:
    """Uniform noise in ``[-epsilon, epsilon]`` on the newest ``obs_dim`` entries, then range clip."""
    clean = np.asarray(clean_obs, dtype=np.float64)
    n = clean.size if obs_dim is None else obs_dim
    noise = np.zeros_like(clean)
    noise[clean.size - n:] = rng.uniform(-budget.epsilon, budget.epsilon, size=n)
    return project(clean + noise, clean, budget)
