import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btms.harness import (
    WORKERS_ENV,
    Evaluator,
    LearningRun,
    RandomizationSpec,
    Task,
    episode_rng,
    evaluate_candidate,
    learn,
    resolve_workers,
    run_scored_episode,
    write_artifacts,
)
from btms.scenarios import build_obstacle_scenario, build_peg_scenario

OBS = build_obstacle_scenario()
GOOD = np.array([0.3, 0.08, -0.2, 0.35, 0.15, 0.35])


@given(st.integers(0, 10**6), st.integers(0, 50))
def test_box_draws_stay_inside_the_box(seed, episode):
    spec = RandomizationSpec(((0.0, 0.5, 0.1),), (0.03, 0.02, 0.01), hole_displacement=0.004)
    start, disp = spec.draw(episode_rng(seed, 0, episode), episode)
    assert np.all(np.abs(start - np.array([0.0, 0.5, 0.1])) <= np.array([0.03, 0.02, 0.01]))
    assert max(abs(disp[0]), abs(disp[1])) <= 0.004


def test_fixed_starts_cycle():
    pts = ((0.0, 0.5, 0.1), (0.1, 0.5, 0.1))
    spec = RandomizationSpec(pts)
    got = [tuple(spec.draw(np.random.default_rng(0), e)[0]) for e in range(4)]
    assert got == [pts[0], pts[1], pts[0], pts[1]]


@pytest.mark.parametrize(
    "kw",
    [dict(start_positions=()), dict(start_positions=((0, 0, float("nan")),)), dict(start_positions=((0, 0, 0),), hole_displacement=-1.0)],
)
def test_randomization_validation(kw):
    with pytest.raises(ValueError):
        RandomizationSpec(**kw)


def test_learning_run_validation():
    with pytest.raises(ValueError):
        LearningRun("x", 10, evals_per_candidate=0)
    with pytest.raises(ValueError):
        LearningRun("x", 10, dt=0.0)


def test_task_needs_exactly_one_policy_kind():
    with pytest.raises(ValueError):
        Task(OBS.task.model, OBS.task.world, OBS.task.rewards)


def test_candidate_score_does_not_depend_on_evaluation_order():
    run = OBS.learning_run(100, seed=3)
    rand = OBS.randomization(3)
    thetas = [GOOD, OBS.space.from_unit(np.full(6, 0.5))]
    forward = [evaluate_candidate(t, run, rand, OBS.task, i) for i, t in enumerate(thetas)]
    backward = [evaluate_candidate(t, run, rand, OBS.task, i) for i, t in reversed(list(enumerate(thetas)))][::-1]
    assert forward == backward
    assert forward[0].all_success and forward[0].mean_return > forward[1].mean_return


def test_pool_matches_in_process_evaluation():
    run = OBS.learning_run(100, seed=1)
    rand = OBS.randomization(1)
    thetas = [OBS.space.from_unit(u) for u in np.random.default_rng(0).random((6, 6))]
    with Evaluator(run, rand, OBS.task, workers=1) as one, Evaluator(run, rand, OBS.task, workers=3) as three:
        assert one(thetas, 10) == three(thetas, 10)


def test_unreachable_start_scores_the_floor():
    res = run_scored_episode(OBS.task, OBS.task.policy(GOOD), (3.0, 0.0, 0.0), (0.0, 0.0), 100, 0.01)
    assert res.fault and res.ret == OBS.task.floor_return and not res.success


def test_resolve_workers(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers(None) == 1
    monkeypatch.setenv(WORKERS_ENV, "4")
    assert resolve_workers(None) == 4
    assert resolve_workers(2) == 2
    with pytest.raises(ValueError):
        resolve_workers(0)


def test_learn_writes_artifacts_and_respects_budget(tmp_path):
    peg = build_peg_scenario()
    run = peg.learning_run(40, seed=2)
    rand = peg.randomization(2)
    res = learn(run, rand, peg.task, peg.space)
    assert res.evals_used <= 40 and len(res.evaluations) == res.evals_used
    assert peg.space.contains(res.theta)
    out = write_artifacts(res, run, rand, peg.space, tmp_path / "art")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["evaluations_used"] == res.evals_used
    assert manifest["run"]["seed"] == 2
    lines = (out / "evaluations.csv").read_text().splitlines()
    assert lines[0].startswith("eval,generation") and len(lines) == res.evals_used + 1
    assert (out / "trace.csv").exists()


def test_stop_at_first_success_records_the_index():
    run = OBS.learning_run(200, seed=0, stop_at_first_success=True)
    res = learn(run, OBS.randomization(0), OBS.task, OBS.space, initial_mean=GOOD)
    assert res.first_success is not None
    hit = res.evaluations[res.first_success - 1]
    assert hit.success_rate == 1.0
    assert all(r.success_rate < 1.0 for r in res.evaluations[: res.first_success - 1])
    assert res.evals_used < 200
