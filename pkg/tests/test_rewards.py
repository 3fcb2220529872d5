import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btms.episode import TreePolicy, run_episode
from btms.rewards import (
    RewardSpec,
    avoid_term,
    collision_penalty,
    episode_return,
    goal_reward,
    goal_term,
    hole_reward,
    hole_term,
    step_reward,
)
from btms.scenarios import build_obstacle_scenario
from btms.sim import Box, WorldModel, inverse_kinematics

distances = st.floats(0.0, 5.0)


@given(distances, distances)
def test_goal_term_decreases_with_distance(a, b):
    lo, hi = sorted((a, b))
    assert goal_term(lo, 0.4, 0.25) >= goal_term(hi, 0.4, 0.25)
    assert 0.0 < goal_term(hi, 0.4, 0.25) <= goal_term(0.0, 0.4, 0.25)


@given(distances, distances)
def test_avoid_term_is_negative_and_relaxes_with_distance(a, b):
    lo, hi = sorted((a, b))
    assert avoid_term(lo, 0.03) <= avoid_term(hi, 0.03) < 0.0


@given(distances)
def test_hole_term_is_bounded_by_its_value_at_the_hole(d):
    assert 0.0 < hole_term(d, 0.006) <= hole_term(0.0, 0.006)


def test_public_wrappers_match_closed_forms():
    spec = RewardSpec(goal=(0.1, 0.2, 0.3))
    world = WorldModel(obstacle=Box((0.0, 0.0, 0.0), (0.1, 0.1, 0.1)))
    p = np.array([0.1, 0.2, 0.3])
    assert goal_reward(p, spec) == pytest.approx(math.exp(-0.25 / 0.32))
    # (0.1, 0.2, 0.3) is 0.2 from the face y = 0.1 and 0.2 from z = 0.1
    d_box = math.hypot(0.1, 0.2)
    assert collision_penalty(p, world, spec) == pytest.approx(-1.0 / (d_box + 0.03) ** 2)
    assert hole_reward(p, world, spec) > 0


def test_collision_penalty_without_obstacle_is_zero():
    spec = RewardSpec(goal=(0.0, 0.0, 0.0))
    assert collision_penalty((0.0, 0.0, 0.0), WorldModel(), spec) == 0.0


def test_step_reward_total_is_weighted_sum():
    spec = RewardSpec(goal=(0.0, 0.5, 0.1), w_goal=2.0, w_avoid=0.5, w_hole=3.0)
    world = WorldModel(obstacle=Box((0.0, 0.5, 0.125), (0.05, 0.2, 0.125)))
    b = step_reward((0.1, 0.5, 0.2), world, spec)
    assert b.total == pytest.approx(2.0 * b.r_g + 0.5 * b.r_a + 3.0 * b.r_h)


@pytest.mark.parametrize("field", ["sigma_c", "d_a", "d_h"])
def test_reward_spec_rejects_non_positive_constants(field):
    with pytest.raises(ValueError):
        RewardSpec(goal=(0, 0, 0), **{field: 0.0})


def test_reward_spec_rejects_non_finite_weights():
    with pytest.raises(ValueError):
        RewardSpec(goal=(0, 0, 0), w_goal=math.nan)


def test_episode_return_matches_kernel_summary():
    sc = build_obstacle_scenario()
    theta = np.array([0.3, 0.08, -0.2, 0.35, 0.15, 0.35])
    q0 = inverse_kinematics(sc.task.model, (-0.25, 0.5, 0.1))
    log = run_episode(sc.task.model, sc.task.world, TreePolicy(sc.tree, theta), 1000, 0.01, q0, sc.task.rewards)
    assert log.success
    ret = episode_return(log, sc.task.rewards)
    shaped = ret - sc.task.rewards.finish_bonus
    expected = 100.0 * log.r_g.sum() + log.r_a.sum()
    assert shaped == pytest.approx(expected, rel=1e-12)
