"""Learning loop: bind parameters, run randomized episodes, drive the optimizer.

Each candidate is scored by the mean return over ``evals_per_candidate``
episodes.  Episode ``e`` of candidate ``i`` draws its start pose and hole
displacement from ``SeedSequence([seed, i, e])``, so scores do not depend on
how candidates are spread over worker processes.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernel as K
from .bt import BtNode, TickStatus
from .cmaes import Bipop, ParamSpace
from .episode import (
    NeuralPolicy,
    NNConfig,
    TreePolicy,
    nn_output_jacobian,
    nn_policy_forward,
    simulate_summary,
)
from .rewards import RewardSpec
from .sim import ArmModel, WorldModel, inverse_kinematics

log = logging.getLogger(__name__)

WORKERS_ENV = "BTMS_WORKERS"
DEFAULT_FLOOR = -1e7

__all__ = [
    "EpisodeResult",
    "LearnResult",
    "LearningRun",
    "RandomizationSpec",
    "Task",
    "evaluate_candidate",
    "learn",
    "nn_output_jacobian",
    "nn_policy_forward",
]


@dataclass(frozen=True)
class RandomizationSpec:
    """Where episodes start and how far the hole moves.

    With ``start_half`` all zero, episode ``e`` starts at
    ``start_positions[e % len(start_positions)]``.  Otherwise the start is
    drawn uniformly from the box ``start_positions[0] +- start_half``.
    """

    start_positions: tuple[tuple[float, float, float], ...]
    start_half: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hole_displacement: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.start_positions:
            raise ValueError("at least one start position required")
        vals = [v for p in self.start_positions for v in p] + list(self.start_half) + [self.hole_displacement]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("randomization ranges must be finite")
        if min(self.start_half) < 0 or self.hole_displacement < 0:
            raise ValueError("ranges must be non-negative")

    @property
    def box(self) -> bool:
        return any(h > 0 for h in self.start_half)

    def draw(self, rng: np.random.Generator, episode: int) -> tuple[np.ndarray, tuple[float, float]]:
        if self.box:
            start = np.asarray(self.start_positions[0]) + rng.uniform(-1, 1, 3) * np.asarray(self.start_half)
        else:
            start = np.asarray(self.start_positions[episode % len(self.start_positions)], float)
        d = self.hole_displacement
        disp = (float(rng.uniform(-d, d)), float(rng.uniform(-d, d))) if d > 0 else (0.0, 0.0)
        return start, disp


@dataclass(frozen=True)
class Task:
    """Everything needed to turn ``theta`` into scored episodes.

    Exactly one of ``tree`` / ``nn`` is set.
    """

    model: ArmModel
    world: WorldModel
    rewards: RewardSpec
    tree: BtNode | None = None
    nn: NNConfig | None = None
    require_no_collision: bool = False
    floor_return: float = DEFAULT_FLOOR

    def __post_init__(self):
        if (self.tree is None) == (self.nn is None):
            raise ValueError("task needs exactly one of tree / nn")

    def policy(self, theta) -> TreePolicy | NeuralPolicy:
        theta = np.asarray(theta, float)
        if self.tree is not None:
            return TreePolicy(self.tree, theta)
        return NeuralPolicy(theta, self.nn)


@dataclass(frozen=True)
class LearningRun:
    scenario: str
    max_evaluations: int
    evals_per_candidate: int = 5
    T: int = 1000
    dt: float = 0.01
    seed: int = 0
    sigma0: float = 0.3
    popsize: int | None = None
    stop_at_first_success: bool = False

    def __post_init__(self):
        if self.evals_per_candidate < 1:
            raise ValueError("evals_per_candidate must be at least 1")
        if self.max_evaluations < 0 or self.T < 1 or not self.dt > 0:
            raise ValueError("budget must be >= 0, T >= 1 and dt > 0")


@dataclass(frozen=True)
class EpisodeResult:
    ret: float
    success: bool
    collisions: int
    fault: bool
    steps: int


@dataclass(frozen=True)
class CandidateResult:
    index: int
    mean_return: float
    episodes: tuple[EpisodeResult, ...]

    @property
    def success_rate(self) -> float:
        return sum(e.success for e in self.episodes) / len(self.episodes)

    @property
    def all_success(self) -> bool:
        return all(e.success for e in self.episodes)


def episode_rng(seed: int, candidate: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(candidate), int(episode)]))


def run_scored_episode(task: Task, policy, start, displacement, T: int, dt: float) -> EpisodeResult:
    world = task.world.displaced(*displacement) if any(displacement) else task.world
    rp = task.rewards.as_array()
    try:
        q0 = inverse_kinematics(task.model, start)
    except ValueError:
        return EpisodeResult(task.floor_return, False, 0, True, 0)
    s = simulate_summary(task.model.as_array(), world.as_array(), rp, policy, q0, T, dt)
    fault = bool(s[K.S_FAULT])
    collisions = int(s[K.S_COLLISIONS])
    success = int(s[K.S_STATUS]) == TickStatus.SUCCESS and not fault
    if task.require_no_collision and collisions:
        success = False
    ret = task.floor_return if fault else K.shaped_return(s, rp)
    if not math.isfinite(ret):
        ret, fault = task.floor_return, True
    return EpisodeResult(ret, success, collisions, fault, int(s[K.S_STEPS]))


def evaluate_candidate(
    theta,
    run: LearningRun,
    rand: RandomizationSpec,
    task: Task,
    candidate: int = 0,
) -> CandidateResult:
    """Mean return of ``theta`` over ``run.evals_per_candidate`` randomized episodes."""
    policy = task.policy(theta)
    episodes = []
    for e in range(run.evals_per_candidate):
        start, disp = rand.draw(episode_rng(rand.seed, candidate, e), e)
        episodes.append(run_scored_episode(task, policy, start, disp, run.T, run.dt))
    total = 0.0
    for ep in episodes:  # fixed summation order
        total += ep.ret
    return CandidateResult(candidate, total / len(episodes), tuple(episodes))


# ---------------------------------------------------------------------------
# parallel evaluation
# ---------------------------------------------------------------------------

_WORKER_CTX: tuple | None = None


def _init_worker(run, rand, task):
    global _WORKER_CTX
    _WORKER_CTX = (run, rand, task)


def _eval_job(job):
    theta, idx = job
    run, rand, task = _WORKER_CTX
    return evaluate_candidate(theta, run, rand, task, idx)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV, "").strip()
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("worker count must be at least 1")
    return workers


class Evaluator:
    """Evaluates batches of candidates, in-process or on a fork pool.  Results come back in input order."""

    def __init__(self, run: LearningRun, rand: RandomizationSpec, task: Task, workers: int | None = None):
        self.run, self.rand, self.task = run, rand, task
        self.workers = resolve_workers(workers)
        self._pool = None
        if self.workers > 1:
            ctx = mp.get_context("fork")
            self._pool = ctx.Pool(self.workers, initializer=_init_worker, initargs=(run, rand, task))

    def __call__(self, thetas: Sequence[np.ndarray], first_index: int) -> list[CandidateResult]:
        jobs = [(np.asarray(t, float), first_index + i) for i, t in enumerate(thetas)]
        if self._pool is None:
            return [evaluate_candidate(t, self.run, self.rand, self.task, i) for t, i in jobs]
        return self._pool.map(_eval_job, jobs, chunksize=max(1, len(jobs) // (4 * self.workers)))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# learning
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    index: int
    generation: int
    mean_return: float
    success_rate: float
    collisions: int
    faults: int


@dataclass
class LearnResult:
    theta: np.ndarray
    optimizer: Bipop
    evaluations: list[EvalRecord] = field(default_factory=list)
    first_success: int | None = None  # 1-based evaluation count of the first all-success candidate

    @property
    def evals_used(self) -> int:
        return self.optimizer.evals

    def best_so_far(self) -> np.ndarray:
        return np.array([row.best_so_far for row in self.optimizer.trace])


def learn(
    run: LearningRun,
    rand: RandomizationSpec,
    task: Task,
    space: ParamSpace,
    initial_mean=None,
    workers: int | None = None,
) -> LearnResult:
    """Optimize ``theta`` for ``task`` until the evaluation budget is spent.

    Returns the mean of the last population of the best run; with a zero
    budget that is ``initial_mean``.
    """
    opt = Bipop(
        space,
        run.max_evaluations,
        np.random.SeedSequence([run.seed, 0xC3A]),
        initial_mean,
        run.sigma0,
        lam0=run.popsize,
    )
    result = LearnResult(theta=opt.final_parameters(), optimizer=opt)
    with Evaluator(run, rand, task, workers) as evaluator:
        while not opt.done:
            thetas = opt.ask()
            scored = evaluator(thetas, opt.evals)
            for c in scored:
                result.evaluations.append(
                    EvalRecord(
                        c.index + 1,
                        opt.generations,
                        c.mean_return,
                        c.success_rate,
                        sum(e.collisions for e in c.episodes),
                        sum(e.fault for e in c.episodes),
                    )
                )
                if result.first_success is None and c.all_success:
                    result.first_success = c.index + 1
            opt.tell([c.mean_return for c in scored])
            if run.stop_at_first_success and result.first_success is not None:
                break
    result.theta = opt.final_parameters()
    if opt.trace and opt.best_J <= opt.trace[0].best_J:
        log.warning("%s: no improvement over the first generation", run.scenario)
    return result


EVAL_HEADER = ["eval", "generation", "mean_return", "success_rate", "collisions", "faults"]


def write_evaluations(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in records:
            w.writerow([r.index, r.generation, repr(float(r.mean_return)), repr(float(r.success_rate)), r.collisions, r.faults])


def write_manifest(run: LearningRun, rand: RandomizationSpec, space: ParamSpace, path: str | Path, **extra) -> None:
    doc = {
        "scenario": run.scenario,
        "run": asdict(run),
        "randomization": asdict(rand),
        "space": space.to_dict(),
        **extra,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_artifacts(result: LearnResult, run: LearningRun, rand: RandomizationSpec, space: ParamSpace, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.optimizer.write_trace(out / "trace.csv")
    write_evaluations(result.evaluations, out / "evaluations.csv")
    write_manifest(
        run,
        rand,
        space,
        out / "manifest.json",
        evaluations_used=result.evals_used,
        generations=result.optimizer.generations,
        restarts=result.optimizer.restart_count,
        first_success=result.first_success,
    )
    return out
