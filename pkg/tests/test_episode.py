import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btms import kernel as K
from btms.bt import TickStatus
from btms.episode import (
    LOG_COLUMNS,
    NeuralPolicy,
    TreePolicy,
    nn_output_jacobian,
    nn_param_count,
    nn_policy_forward,
    run_episode,
    unpack_weights,
)
from btms.scenarios import (
    build_nn_obstacle_scenario,
    build_obstacle_scenario,
    build_peg_scenario,
    peg_grid,
)
from btms.sim import inverse_kinematics

OBSTACLE_THETA = np.array([0.3, 0.08, -0.2, 0.35, 0.15, 0.35])


def _episode(sc, policy, start, T, backend="kernel", world=None):
    q0 = inverse_kinematics(sc.task.model, start)
    return run_episode(sc.task.model, world or sc.task.world, policy, T, sc.dt, q0, sc.task.rewards, backend)


def _assert_same_log(a, b):
    assert len(a) == len(b)
    assert a.final_status == b.final_status and a.fault == b.fault
    assert np.allclose(a.rows, b.rows, rtol=0, atol=1e-10)


def test_python_and_kernel_agree_on_obstacle_task():
    sc = build_obstacle_scenario()
    policy = TreePolicy(sc.tree, OBSTACLE_THETA)
    k = _episode(sc, policy, (-0.25, 0.5, 0.1), 1000)
    p = _episode(sc, policy, (-0.25, 0.5, 0.1), 1000, backend="python")
    _assert_same_log(k, p)
    assert k.success and k.collisions == 0


@pytest.mark.parametrize("pose", [0, 3, 9])
def test_python_and_kernel_agree_on_peg_task(pose):
    sc = build_peg_scenario()
    policy = TreePolicy(sc.tree, np.array([0.04, 0.005]))
    world = sc.task.world.displaced(0.004, -0.003)
    k = _episode(sc, policy, peg_grid()[pose], 1500, world=world)
    p = _episode(sc, policy, peg_grid()[pose], 1500, backend="python", world=world)
    _assert_same_log(k, p)


def test_python_and_kernel_agree_on_neural_policy():
    sc = build_nn_obstacle_scenario()
    w = np.random.default_rng(0).uniform(-1, 1, sc.space.dims)
    policy = NeuralPolicy(w, sc.task.nn)
    _assert_same_log(_episode(sc, policy, (-0.25, 0.5, 0.1), 400), _episode(sc, policy, (-0.25, 0.5, 0.1), 400, "python"))


def test_log_columns_and_csv(tmp_path):
    sc = build_obstacle_scenario()
    log = _episode(sc, TreePolicy(sc.tree, OBSTACLE_THETA), (-0.25, 0.5, 0.1), 1000)
    assert log.rows.shape[1] == len(LOG_COLUMNS) == K.L_SIZE
    assert np.allclose(np.diff(log.t), sc.dt)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_COLUMNS
    assert len(rows) == len(log) + 1
    assert {r[K.L_STATUS] for r in rows[1:]} == {"RUNNING"}
    assert log.final_status is TickStatus.SUCCESS
    assert float(rows[5][K.L_EE + 2]) == log.x_ee[4, 2]  # repr floats round-trip
    seg = log.segment(10, 20)
    assert len(seg) == 10 and seg.final_status is TickStatus.RUNNING


def test_episode_stops_when_the_tree_finishes():
    sc = build_obstacle_scenario()
    log = _episode(sc, TreePolicy(sc.tree, OBSTACLE_THETA), (-0.25, 0.5, 0.1), 5000)
    assert log.success and len(log) < 5000


def test_unknown_backend_is_rejected():
    sc = build_obstacle_scenario()
    with pytest.raises(ValueError):
        _episode(sc, TreePolicy(sc.tree, OBSTACLE_THETA), (-0.25, 0.5, 0.1), 10, backend="gpu")


def test_collisions_are_counted_when_driving_through_the_obstacle():
    sc = build_obstacle_scenario()
    # thresholds unreachable: the tree heads straight for g1 inside the box
    theta = np.array([0.35, 0.2, 0.0, 0.1, 0.0, 0.1])
    log = _episode(sc, TreePolicy(sc.tree, theta), (-0.25, 0.5, 0.1), 600)
    assert log.collisions > 0
    assert log.r_a.min() == pytest.approx(-1.0 / 0.03**2)


NN = build_nn_obstacle_scenario().task.nn
weights = st.lists(st.floats(-3, 3), min_size=nn_param_count(), max_size=nn_param_count()).map(np.array)
obs = st.lists(st.floats(-2, 2), min_size=3, max_size=3).map(np.array)


@settings(max_examples=30)
@given(weights, obs)
def test_nn_jacobian_matches_finite_differences(w, x):
    J = nn_output_jacobian(w, x, NN)
    h = 1e-6
    fd = np.empty_like(J)
    for i in range(len(w)):
        dw = np.zeros_like(w)
        dw[i] = h
        fd[:, i] = (nn_policy_forward(w + dw, x, NN) - nn_policy_forward(w - dw, x, NN)) / (2 * h)
    assert np.allclose(J, fd, atol=1e-7)


@given(weights, obs)
def test_nn_output_stays_in_the_workspace_box(w, x):
    y = nn_policy_forward(w, x, NN)
    assert np.all(np.abs(y - np.array(NN.center)) <= np.array(NN.half) + 1e-12)


def test_weight_layout():
    n = nn_param_count(3, 10, 3)
    assert n == 73
    W1, b1, W2, b2 = unpack_weights(np.arange(n, dtype=float))
    assert W1.shape == (10, 3) and W1[0, 1] == 1.0
    assert b1[0] == 30.0 and W2.shape == (3, 10) and W2[1, 0] == 50.0 and b2[-1] == 72.0
    with pytest.raises(ValueError):
        unpack_weights(np.zeros(n - 1))
