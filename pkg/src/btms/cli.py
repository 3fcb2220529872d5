"""Command-line front end.

Exit status: 0 ok, 1 usage error, 2 bad configuration or input files,
3 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bt import BtError, render
from .episode import run_episode
from .harness import WORKERS_ENV, learn, resolve_workers, write_artifacts
from .scenarios import (
    SCENARIOS,
    EvaluationReport,
    combine_policies,
    default_trials,
    describe,
    evaluate,
    get_scenario,
    load_policy,
    policy_for,
)
from .sim import inverse_kinematics

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("btms")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="btms", description="Learn and run behavior-tree policies with parametric movement skills.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("learn", help="optimize a scenario's parameters")
    s.add_argument("scenario", choices=sorted(SCENARIOS))
    s.add_argument("--budget", type=int, default=5000, help="candidate evaluations")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--evals", type=int, default=None, help="episodes per candidate")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--workers", type=int, default=None, help=f"worker processes (default: ${WORKERS_ENV} or 1)")

    s = sub.add_parser("eval", help="evaluate a policy file on held-out trials")
    s.add_argument("policy", type=Path)
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--displace", type=float, default=None, help="hole displacement range, metres")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, default=None, help="per-trial CSV")

    s = sub.add_parser("combine", help="splice a peg policy into an obstacle policy")
    s.add_argument("obstacle_policy", type=Path)
    s.add_argument("peg_policy", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("replay", help="run one evaluation trial and write the per-step log")
    s.add_argument("policy", type=Path)
    s.add_argument("--trace-csv", type=Path, required=True)
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--displace", type=float, default=None)

    s = sub.add_parser("inspect", help="print learned parameters and the tree")
    s.add_argument("policy", type=Path)
    return p


def cmd_learn(args) -> int:
    sc = get_scenario(args.scenario)
    if args.budget < 0:
        raise ValueError("--budget must be non-negative")
    run = sc.learning_run(args.budget, seed=args.seed, evals=args.evals)
    rand = sc.randomization(args.seed)
    result = learn(run, rand, sc.task, sc.space, sc.initial_mean, workers=resolve_workers(args.workers))
    out = write_artifacts(result, run, rand, sc.space, args.out)
    policy = policy_for(sc, result.theta, seed=args.seed, budget=args.budget, evaluations=result.evals_used)
    policy.save(out / "policy.json")
    print(json.dumps({"out": str(out), "evaluations": result.evals_used, "best_J": result.optimizer.best_J}))
    return EXIT_OK


def _report_json(report: EvaluationReport) -> str:
    return json.dumps(report.summary(), sort_keys=True)


def cmd_eval(args) -> int:
    policy = load_policy(args.policy)
    sc = policy.scenario_object()
    trials = default_trials(sc, args.trials, args.seed, args.displace)
    report = evaluate(sc, policy.theta, trials)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    print(_report_json(report))
    return EXIT_OK


def cmd_combine(args) -> int:
    combined = combine_policies(load_policy(args.obstacle_policy), load_policy(args.peg_policy))
    combined.save(args.out)
    print(args.out)
    return EXIT_OK


def cmd_replay(args) -> int:
    policy = load_policy(args.policy)
    sc = policy.scenario_object()
    trials = default_trials(sc, max(args.trial + 1, 1), args.seed, args.displace)
    if not 0 <= args.trial < len(trials):
        raise ValueError("--trial out of range")
    tr = trials[args.trial]
    world = sc.task.world.displaced(*tr.displacement)
    q0 = inverse_kinematics(sc.task.model, tr.start)
    ep = run_episode(sc.task.model, world, sc.task.policy(policy.theta), sc.eval_T, sc.dt, q0, sc.task.rewards)
    args.trace_csv.parent.mkdir(parents=True, exist_ok=True)
    ep.to_csv(args.trace_csv)
    print(json.dumps({"steps": len(ep), "status": ep.final_status.name, "collisions": ep.collisions, "fault": ep.fault}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    policy = load_policy(args.policy)
    print(describe(policy))
    if policy.tree is not None:
        print()
        print(render(policy.tree, policy.theta))
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn,
    "eval": cmd_eval,
    "combine": cmd_combine,
    "replay": cmd_replay,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (BtError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
