"""Command line entry point: ``rtca <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .ctde import td_train
from .envs import make_env
from .errors import CheckpointError, ConfigurationError, DivergenceError, UsageError
from .harness import (RunConfig, ablation_table, ablation_objective, evaluate, load_qnet, load_team,
                      read_report, results_table, transfer_experiment, transfer_table, write_report)
from .jointq import JointQNet, train_sarsa

log = logging.getLogger("rtca")


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config JSON")
    p.add_argument("--seed", type=int, help="training seed, or the single evaluation seed")
    p.add_argument("--out", type=Path, help="output directory or file")
    p.add_argument("--episodes", type=int, help="training episodes / evaluation episodes per seed")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtca", description="Robustness testing of cooperative MARL teams")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a VDN or QMIX team")
    _common(p)
    p.add_argument("--algo", choices=("vdn", "qmix"), help="overrides ctde.algo")

    p = sub.add_parser("train-sarsa-q", help="fit the joint action-value net on a trained team")
    _common(p)
    p.add_argument("--steps", type=int, help="overrides jointq.train.steps")

    p = sub.add_parser("evaluate", help="evaluate attack methods; comma lists sweep")
    _common(p)
    p.add_argument("--method", type=_csv_list(str), help="rtca, random, fgsm_untargeted, none")
    p.add_argument("--victims", type=_csv_list(int), help="number of victims M")

    p = sub.add_parser("ablate", help="team's own critic vs the Sarsa joint-Q as the DE objective")
    _common(p)
    p.add_argument("--victims", type=_csv_list(int))

    p = sub.add_parser("transfer", help="attack a team with joint-Q nets trained on other teams")
    _common(p)
    p.add_argument("--victims", type=_csv_list(int))
    p.add_argument("--qnet", type=Path, action="append", help="joint-Q checkpoint (repeatable)")

    p = sub.add_parser("report", help="merge report CSVs and print the results table")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="merged CSV or JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "episodes", None) is not None and args.command not in ("train", "train-sarsa-q"):
        cfg = replace(cfg, episodes=args.episodes)
    if getattr(args, "seed", None) is not None and args.command not in ("train", "train-sarsa-q"):
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _sweep_m(cfg: RunConfig, victims) -> list[int]:
    return victims if victims else [cfg.M]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    algo = args.algo or cfg.algo
    tc = cfg.ctde_train if args.episodes is None else replace(cfg.ctde_train, episodes=args.episodes)
    seed = cfg.ctde_seed if args.seed is None else args.seed
    out = args.out or (Path(cfg.ctde_checkpoint) if cfg.ctde_checkpoint else None)
    if out is None:
        raise ConfigurationError("no output directory: pass --out or set ctde.checkpoint")
    team = td_train(make_env(cfg.env), algo, tc, seed)
    team.save(out)
    tail = team.curve[-1] if team.curve else float("nan")
    print(f"trained {algo} team ({tc.episodes} episodes, seed {seed}) -> {out}; last mean return {tail:.2f}")
    return 0


def cmd_train_sarsa(args) -> int:
    cfg = _load_config(args)
    team = load_team(cfg)
    sc = cfg.jointq_train if args.steps is None else replace(cfg.jointq_train, steps=args.steps)
    seed = cfg.jointq_seed if args.seed is None else args.seed
    out = args.out or (Path(cfg.jointq_checkpoint) if cfg.jointq_checkpoint else None)
    if out is None:
        raise ConfigurationError("no output file: pass --out or set jointq.checkpoint")
    env = make_env(cfg.env)
    net = train_sarsa(env, team, sc, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out)
    print(f"trained joint-Q net on the {team.algo} team ({sc.steps} steps, seed {seed}) -> {out}")
    return 0


def _emit(reports, out: Path | None, table: str) -> None:
    print(table)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_report(reports, out / "report.csv")
        write_report(reports, out / "report.json")
        (out / "table.txt").write_text(table + "\n")
        print(f"wrote {out / 'report.csv'}")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    env = make_env(cfg.env)
    team = load_team(cfg)
    methods = args.method or [cfg.method]
    qnet = load_qnet(cfg) if "rtca" in methods else None
    reports = []
    for m in _sweep_m(cfg, args.victims):
        for method in methods:
            run = replace(cfg, method=method, de=replace(cfg.de, M=m))
            reports.append(evaluate(run, team, qnet, env))
    _emit(reports, args.out, results_table(reports))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    env = make_env(cfg.env)
    team = load_team(cfg)
    qnet = load_qnet(cfg)
    pairs = []
    for m in _sweep_m(cfg, args.victims):
        critic, sarsa = ablation_objective(replace(cfg, de=replace(cfg.de, M=m)), team, qnet, env)
        critic.method = "rtca/critic"
        pairs.append((critic, sarsa))
    _emit([r for p in pairs for r in p], args.out, ablation_table(pairs))
    return 0


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    env = make_env(cfg.env)
    victim = load_team(cfg)
    paths = args.qnet or ([Path(cfg.jointq_checkpoint)] if cfg.jointq_checkpoint else [])
    if not paths:
        raise ConfigurationError("no joint-Q nets: pass --qnet or set jointq.checkpoint")
    nets = [JointQNet.load(p) for p in paths]
    reports = []
    for m in _sweep_m(cfg, args.victims):
        for net in nets:
            rep = transfer_experiment(replace(cfg, de=replace(cfg.de, M=m)), net, victim, env)
            rep.method = f"rtca/qjt-{rep.labels['qnet_source']}"
            reports.append(rep)
    _emit(reports, args.out, transfer_table(reports))
    return 0


def cmd_report(args) -> int:
    records = [r for path in args.inputs for r in read_report(path)]
    if args.out is not None:
        write_report(records, args.out)
    header = ["env", "method", "algo", "M", "episodes", "win_rate", "reward"]
    rows = [[r["env"], r["method"], r["algo"], r["M"], r["episodes"], r["win_rate"],
             _reward_text(r["reward_mean"], r["reward_std"])] for r in records]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        print("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip())
    return 0


def _reward_text(mean, std) -> str:
    return f"{mean}" if float(std) == 0 else f"{mean}±{std}"


COMMANDS = {"train": cmd_train, "train-sarsa-q": cmd_train_sarsa, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "transfer": cmd_transfer, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, CheckpointError, UsageError) as exc:
        print(f"rtca {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, OSError, ValueError) as exc:
        print(f"rtca {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
