import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtca import diffcore as dc
from rtca.ctde import AgentPolicy
from rtca.errors import ConfigurationError
from rtca.perturb import (AttackBudget, attack_random, attack_targeted, attack_untargeted, fgsm_step,
                          project, targeted_loss, untargeted_loss)

from conftest import central_diff, fd_rel_err


def make_policy(seed, obs_dim=5, n_actions=4, history_len=1):
    spec = dc.MlpSpec((obs_dim * history_len, 8, n_actions), "tanh")
    return AgentPolicy(spec, dc.init_params(spec, np.random.default_rng(seed), scale=3.0), obs_dim, history_len)


def test_budget_validation():
    with pytest.raises(ConfigurationError):
        AttackBudget(epsilon=-0.1)
    with pytest.raises(ConfigurationError):
        AttackBudget(clip_low=1.0, clip_high=0.0)
    assert AttackBudget(epsilon=0.2, steps=4).step_size == pytest.approx(0.05)


def test_fgsm_step_clips_to_range():
    b = AttackBudget(epsilon=0.1)
    out = fgsm_step(np.array([0.95]), np.array([-1.0]), 0.1, np.array([0.95]), b)
    assert out.tolist() == [1.0]


def test_fgsm_step_leaves_zero_gradient_components():
    b = AttackBudget(epsilon=0.1)
    clean = np.array([0.5, 0.5])
    out = fgsm_step(clean, np.array([0.0, 2.0]), 0.1, clean, b)
    assert out[0] == 0.5 and out[1] == pytest.approx(0.4)


def test_projection_is_idempotent():
    b = AttackBudget(epsilon=0.1)
    rng = np.random.default_rng(0)
    clean = rng.random(20)
    x = project(clean + rng.normal(size=20), clean, b)
    assert np.array_equal(project(x, clean, b), x)
    assert np.array_equal(project(clean, clean, b), clean)


def test_targeted_loss_gradient():
    pol = make_policy(1)
    x = np.random.default_rng(2).random(5)
    _, g = targeted_loss(pol, x, 2, 0)
    assert fd_rel_err(g, central_diff(lambda v: targeted_loss(pol, v, 2, 0)[0], x)) < 1e-5
    _, g = untargeted_loss(pol, x, 1)
    assert fd_rel_err(g, central_diff(lambda v: untargeted_loss(pol, v, 1)[0], x)) < 1e-5


def test_self_target_is_neutral():
    pol = make_policy(3)
    x = np.full(5, 0.5)
    clean = pol.greedy(x)
    loss, g = targeted_loss(pol, x, clean, clean)
    assert loss == 0.0 and not g.any()
    out = attack_targeted(pol, x, clean, AttackBudget(epsilon=0.1))
    assert np.array_equal(out.adversarial_obs, x) and out.target_hit


def test_uniform_policy_has_zero_loss():
    spec = dc.MlpSpec((3, 4))
    pol = AgentPolicy(spec, {"W0": np.zeros((4, 3)), "b0": np.zeros(4)}, 3)
    assert targeted_loss(pol, np.zeros(3), 2, 0)[0] == 0.0


def test_step_descends_targeted_loss():
    pol = make_policy(4)
    rng = np.random.default_rng(5)
    drops = 0
    for _ in range(50):
        x = rng.random(5) * 0.6 + 0.2
        clean = pol.greedy(x)
        target = (clean + 1) % 4
        before = targeted_loss(pol, x, target, clean)[0]
        adv = attack_targeted(pol, x, target, AttackBudget(epsilon=0.01)).adversarial_obs
        drops += targeted_loss(pol, adv, target, clean)[0] < before
    assert drops >= 45


def test_only_newest_observation_is_perturbed():
    pol = make_policy(6, obs_dim=3, history_len=2)
    hist = np.full(6, 0.5)
    clean = pol.greedy(hist)
    adv = attack_targeted(pol, hist, (clean + 1) % 4, AttackBudget(epsilon=0.1, steps=3)).adversarial_obs
    assert np.array_equal(adv[:3], hist[:3])
    noisy = attack_random(hist, AttackBudget(epsilon=0.1), np.random.default_rng(0), obs_dim=3)
    assert np.array_equal(noisy[:3], hist[:3])


def test_zero_budget_changes_nothing():
    pol = make_policy(7)
    x = np.full(5, 0.3)
    b = AttackBudget(epsilon=0.0)
    assert np.array_equal(attack_targeted(pol, x, 1, b).adversarial_obs, x)
    assert np.array_equal(attack_untargeted(pol, x, b).adversarial_obs, x)
    assert np.array_equal(attack_random(x, b, np.random.default_rng(0)), x)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 0.5), st.integers(1, 5), st.integers(0, 3))
def test_every_attack_stays_in_budget(seed, eps, steps, target):
    rng = np.random.default_rng(seed)
    pol = make_policy(seed % 5)
    x = rng.random(5)
    b = AttackBudget(epsilon=eps, steps=steps)
    for adv in (attack_targeted(pol, x, target, b).adversarial_obs,
                attack_untargeted(pol, x, b).adversarial_obs,
                attack_random(x, b, rng)):
        assert np.abs(adv - x).max() <= eps + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0
