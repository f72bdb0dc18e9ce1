import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from rtca.deselect import DeConfig
from rtca.envs import GridCapture
from rtca.errors import ConfigurationError
from rtca.harness import (CSV_COLUMNS, Report, RunConfig, ablation_objective, ablation_table, evaluate,
                          format_reward, read_report, results_table, run_episode, transfer_experiment,
                          transfer_table, write_report)
from rtca.perturb import AttackBudget


def quick(**kw):
    return replace(RunConfig(), episodes=2, seeds=(0,), de=DeConfig(population_size=20, T=3, M=1), **kw)


def test_config_round_trip_and_validation(tmp_path):
    cfg = RunConfig(epsilon=0.05, method="random", seeds=(3, 4))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"attack": {"eps": 0.1}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"extras": {}})
    with pytest.raises(ConfigurationError):
        RunConfig(method="pgd")
    with pytest.raises(ConfigurationError):
        RunConfig.load(tmp_path / "missing.json")


def test_protocol_defaults():
    cfg = RunConfig()
    assert cfg.episodes == 32 and cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.epsilon == 0.1 and cfg.de.F == 0.5 and cfg.de.population_size == 400


def test_reward_format():
    assert format_reward(19.744, 1.4549) == "19.74±1.45"
    assert format_reward(20.0, 0.0) == "20.00"
    assert format_reward(3.0, 0.004) == "3.00"


@pytest.mark.parametrize("method,kwargs", [
    ("rtca", {"M": 0}),
    ("rtca", {"M": 1, "budget": AttackBudget(epsilon=0.0)}),
    ("random", {"M": 2, "budget": AttackBudget(epsilon=0.0)}),
    ("fgsm_untargeted", {"M": 1, "budget": AttackBudget(epsilon=0.0)}),
])
def test_null_attacks_reproduce_clean_trace(grid_env, small_teams, small_qnets, method, kwargs):
    team, qnet = small_teams["qmix"], small_qnets["qmix"]
    de = DeConfig(population_size=20, T=3, M=kwargs["M"])
    for seed in range(3):
        clean = run_episode(grid_env, team, seed)
        attacked = run_episode(grid_env, team, seed, method, qnet=qnet, de_config=de, **kwargs)
        assert attacked.trace_hash() == clean.trace_hash()


def test_rtca_logs_victims_and_targets(grid_env, small_teams, small_qnets):
    res = run_episode(grid_env, small_teams["vdn"], 5, "rtca", 2, qnet=small_qnets["vdn"],
                      de_config=DeConfig(population_size=20, T=3, M=2))
    for log in res.attack_log:
        assert len(log.victims) == len(set(log.victims)) <= 2
        assert all(h == (i == t) for h, i, t in zip(log.hits, log.induced, log.targets))


def test_environment_mismatch_is_refused(small_teams, small_qnets):
    other = GridCapture(prey_hp=7)
    with pytest.raises(ConfigurationError):
        run_episode(other, small_teams["qmix"], 0)
    with pytest.raises(ConfigurationError):
        evaluate(quick(method="rtca", env={"name": "grid_capture", "prey_hp": 7}),
                 small_teams["qmix"], small_qnets["qmix"])


def test_rtca_needs_a_qnet(grid_env, small_teams):
    with pytest.raises(ConfigurationError):
        run_episode(grid_env, small_teams["qmix"], 0, "rtca", 1)


def test_evaluate_counts_and_determinism(small_teams):
    cfg = replace(RunConfig(method="none"), seeds=(0, 1))
    rep = evaluate(cfg, small_teams["vdn"])
    assert rep.episodes == 64 and len(rep.rewards) == 64
    assert rep.reward_std == pytest.approx(np.std(rep.rewards))
    again = evaluate(cfg, small_teams["vdn"])
    assert again.rewards == rep.rewards


def test_ablation_only_changes_the_objective(small_teams, small_qnets):
    critic, sarsa = ablation_objective(quick(), small_teams["qmix"], small_qnets["qmix"])
    assert critic.labels["objective"] == "centralized_critic"
    assert sarsa.labels["objective"] == "sarsa_qjt"
    assert critic.config_hash != sarsa.config_hash
    table = ablation_table([(critic, sarsa)])
    assert "Q~jt WR" in table and "VDN/QMIX Reward" in table


def test_ablation_without_critic(small_teams, small_qnets):
    team = replace(small_teams["qmix"], mixer=None)
    with pytest.raises(ConfigurationError):
        ablation_objective(quick(), team, small_qnets["qmix"])


def test_transfer_flags_self_transfer(small_teams, small_qnets):
    with pytest.warns(UserWarning):
        transfer_experiment(quick(), small_qnets["vdn"], small_teams["vdn"])
    rep = transfer_experiment(quick(), small_qnets["vdn"], small_teams["qmix"])
    assert rep.labels["qnet_source"] == "vdn" and rep.algo == "qmix"
    assert "Q~jt(VDN) WR" in transfer_table([rep])


def _report(method, mean, std):
    return Report("grid_capture", method, "qmix", 1, 160, 0.5, mean, std, [0, 1, 2, 3, 4], "abc")


def test_report_files(tmp_path):
    reps = [_report("rtca", 13.754, 7.661), _report("random", 19.0, 0.0)]
    write_report(reps, tmp_path / "r.csv")
    write_report(reps, tmp_path / "r.json")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["reward_mean"] == "13.75" and rows[0]["reward_std"] == "7.66"
    assert rows[0]["seed_set"] == "0;1;2;3;4"
    assert read_report(tmp_path / "r.json") == read_report(tmp_path / "r.csv")
    table = results_table(reps)
    assert "13.75±7.66" in table and "19.00" in table and "19.00±" not in table
