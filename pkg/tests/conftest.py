import time
from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from btms.harness import learn
from btms.scenarios import (
    build_nn_obstacle_scenario,
    build_obstacle_scenario,
    build_peg_scenario,
    default_trials,
    evaluate,
    no_search_theta,
    policy_for,
    random_thetas,
)

settings.register_profile("btms", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("btms")

REPLICATES = 10
OBSTACLE_BUDGET = 5000
HELD_OUT_STARTS = 20
PEG_BUDGET = 200
RANDOM_DRAWS = 51

_acceptance_lines: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    finished = rep.when == "call" or (rep.when == "setup" and not rep.passed)
    if not finished:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _acceptance_lines.append((number, title, verdict, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    merged: dict[int, tuple[str, list[str], list[str]]] = {}
    for number, title, verdict, detail in _acceptance_lines:
        _, verdicts, details = merged.setdefault(number, (title, [], []))
        verdicts.append(verdict)
        if detail:
            details.append(detail)
    terminalreporter.section("acceptance criteria")
    for number in sorted(merged):
        title, verdicts, details = merged[number]
        verdict = "FAIL" if "FAIL" in verdicts else ("SKIP" if "SKIP" in verdicts else "PASS")
        line = f"criterion {number:2d} {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(details)}]" if details else ""))


# ---------------------------------------------------------------------------
# learned policies shared by the task-level criteria
# ---------------------------------------------------------------------------


@dataclass
class Replicate:
    seed: int
    theta: np.ndarray
    first_success: int | None
    evals_used: int
    rate: float
    collisions: int
    restarts: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class ReplicateSet:
    replicates: list[Replicate]
    seconds: float
    budget: int
    trials: int

    def rates(self) -> list[float]:
        return [r.rate for r in self.replicates]


@pytest.fixture(scope="session")
def obstacle_replicates() -> ReplicateSet:
    sc = build_obstacle_scenario()
    t0 = time.perf_counter()
    reps = []
    for seed in range(REPLICATES):
        res = learn(sc.learning_run(OBSTACLE_BUDGET, seed=seed), sc.randomization(seed), sc.task, sc.space)
        report = evaluate(sc, res.theta, default_trials(sc, HELD_OUT_STARTS, seed=seed))
        reps.append(
            Replicate(seed, res.theta, res.first_success, res.evals_used, report.rate, report.collisions, res.optimizer.restart_count)
        )
    return ReplicateSet(reps, time.perf_counter() - t0, OBSTACLE_BUDGET, HELD_OUT_STARTS)


@pytest.fixture(scope="session")
def nn_replicates() -> ReplicateSet:
    sc = build_nn_obstacle_scenario()
    t0 = time.perf_counter()
    reps = []
    for seed in range(REPLICATES):
        run = sc.learning_run(OBSTACLE_BUDGET, seed=seed, stop_at_first_success=True)
        res = learn(run, sc.randomization(seed), sc.task, sc.space, sc.initial_mean)
        reps.append(Replicate(seed, res.theta, res.first_success, res.evals_used, float("nan"), 0))
    return ReplicateSet(reps, time.perf_counter() - t0, OBSTACLE_BUDGET, 0)


@pytest.fixture(scope="session")
def peg_replicates() -> ReplicateSet:
    sc = build_peg_scenario()
    t0 = time.perf_counter()
    reps = []
    for seed in range(REPLICATES):
        res = learn(sc.learning_run(PEG_BUDGET, seed=seed), sc.randomization(seed), sc.task, sc.space)
        trials = default_trials(sc, seed=seed)
        learned = evaluate(sc, res.theta, trials)
        no_search = evaluate(sc, no_search_theta(sc.space), trials).rate
        random_rates = [evaluate(sc, th, trials).rate for th in random_thetas(sc.space, RANDOM_DRAWS, seed)]
        reps.append(
            Replicate(
                seed,
                res.theta,
                res.first_success,
                res.evals_used,
                learned.rate,
                learned.collisions,
                extra={"no_search": no_search, "random_median": float(np.median(random_rates))},
            )
        )
    return ReplicateSet(reps, time.perf_counter() - t0, PEG_BUDGET, len(trials))


@pytest.fixture(scope="session")
def obstacle_policies(obstacle_replicates):
    sc = build_obstacle_scenario()
    return [policy_for(sc, r.theta, seed=r.seed) for r in obstacle_replicates.replicates]


@pytest.fixture(scope="session")
def peg_policies(peg_replicates):
    sc = build_peg_scenario()
    return [policy_for(sc, r.theta, seed=r.seed) for r in peg_replicates.replicates]
