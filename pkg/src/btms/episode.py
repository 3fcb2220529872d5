"""Policies, episode logs and the episode runner.

A policy maps the blackboard state to an attractor command each control
step.  :class:`TreePolicy` ticks a behavior tree with a bound parameter
vector; :class:`NeuralPolicy` is the feed-forward baseline whose output sets
the end-effector target directly.

:func:`run_episode` runs the compiled kernel by default.  ``backend="python"``
runs the same loop in Python with the reference tick; both produce the same
:class:`EpisodeLog` layout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernel as K
from .bt import Blackboard, BtNode, CompiledTree, NodeKind, TickStatus, compile_tree, tick
from .rewards import RewardSpec, step_terms
from .sim import ArmModel, WorldModel, contact_update, control_update, fk_position, obstacle_distance
from .skills import ATT_ACTIVE, ATT_SIZE, ATT_XD, CMD_HAS_OVERLAY, CMD_SIZE, CMD_VS, attractor_update

N_HIDDEN = 10


@dataclass(frozen=True)
class TreePolicy:
    tree: BtNode
    theta: np.ndarray

    @cached_property
    def compiled(self) -> CompiledTree:
        return compile_tree(self.tree, self.theta)


@dataclass(frozen=True)
class NNConfig:
    """Observation is ``(peg - goal) / extent``; output is mapped into the
    workspace box ``center +- half``."""

    goal: tuple[float, float, float]
    radius: float
    path_velocity: float
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    extent: float = 0.5
    hidden: int = N_HIDDEN

    def as_array(self) -> np.ndarray:
        cfg = np.zeros(K.N_SIZE)
        cfg[K.N_EXTENT] = self.extent
        cfg[K.N_CENTER : K.N_CENTER + 3] = self.center
        cfg[K.N_HALF : K.N_HALF + 3] = self.half
        cfg[K.N_GOAL : K.N_GOAL + 3] = self.goal
        cfg[K.N_RADIUS] = self.radius
        cfg[K.N_VP] = self.path_velocity
        return cfg


def nn_param_count(n_in: int = 3, n_hidden: int = N_HIDDEN, n_out: int = 3) -> int:
    return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out


def unpack_weights(w, n_in: int = 3, n_hidden: int = N_HIDDEN, n_out: int = 3):
    w = np.asarray(w, float)
    if w.size != nn_param_count(n_in, n_hidden, n_out):
        raise ValueError(f"expected {nn_param_count(n_in, n_hidden, n_out)} weights, got {w.size}")
    o = 0
    W1 = w[o : o + n_in * n_hidden].reshape(n_hidden, n_in)
    o += n_in * n_hidden
    b1 = w[o : o + n_hidden]
    o += n_hidden
    W2 = w[o : o + n_hidden * n_out].reshape(n_out, n_hidden)
    o += n_hidden * n_out
    b2 = w[o : o + n_out]
    return W1, b1, W2, b2


@dataclass(frozen=True)
class NeuralPolicy:
    weights: np.ndarray
    config: NNConfig

    def target(self, peg_position) -> np.ndarray:
        obs = (np.asarray(peg_position, float) - np.asarray(self.config.goal)) / self.config.extent
        return nn_policy_forward(self.weights, obs, self.config)


def nn_policy_forward(weights, observation, config: NNConfig) -> np.ndarray:
    """Target end-effector position: ``center + half * tanh(W2 tanh(W1 x + b1) + b2)``."""
    W1, b1, W2, b2 = unpack_weights(weights, len(observation), config.hidden)
    y = np.tanh(W2 @ np.tanh(W1 @ np.asarray(observation, float) + b1) + b2)
    return np.asarray(config.center) + np.asarray(config.half) * y


def nn_output_jacobian(weights, observation, config: NNConfig) -> np.ndarray:
    """Analytic derivative of :func:`nn_policy_forward` w.r.t. the packed weights (3 x n)."""
    x = np.asarray(observation, float)
    W1, b1, W2, b2 = unpack_weights(weights, len(x), config.hidden)
    h = np.tanh(W1 @ x + b1)
    y = np.tanh(W2 @ h + b2)
    gy = np.asarray(config.half) * (1.0 - y * y)  # d target / d pre-activation (out)
    gh = 1.0 - h * h
    n_in, n_h, n_out = len(x), config.hidden, len(y)
    jac = np.zeros((n_out, nn_param_count(n_in, n_h, n_out)))
    o_b1 = n_in * n_h
    o_w2 = o_b1 + n_h
    o_b2 = o_w2 + n_h * n_out
    for k in range(n_out):
        back = gy[k] * W2[k] * gh  # d target_k / d hidden pre-activation
        jac[k, :o_b1] = np.outer(back, x).ravel()
        jac[k, o_b1:o_w2] = back
        jac[k, o_w2 + k * n_h : o_w2 + (k + 1) * n_h] = gy[k] * h
        jac[k, o_b2 + k] = gy[k]
    return jac


# ---------------------------------------------------------------------------
# episode log
# ---------------------------------------------------------------------------

LOG_COLUMNS = (
    ["t", "q0", "q1", "q2", "x_ee.x", "x_ee.y", "x_ee.z", "peg_tip.x", "peg_tip.y", "peg_tip.z"]
    + ["x_d.x", "x_d.y", "x_d.z", "goal.x", "goal.y", "goal.z", "v_p", "v_s"]
    + ["r_g", "r_a", "r_h", "tick_status", "in_contact", "captured", "penetrating"]
)


@dataclass
class EpisodeLog:
    """Per-step rows ``(x_t, u_t)`` plus scored terms; see :data:`LOG_COLUMNS`.

    Rows are motion steps, so the tick that finishes the episode produces no
    row; its status is ``final_status``.
    """

    rows: np.ndarray
    final_status: TickStatus
    fault: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, idx: int) -> np.ndarray:
        return self.rows[:, idx]

    @property
    def t(self):
        return self.rows[:, K.L_T]

    @property
    def q(self):
        return self.rows[:, K.L_Q : K.L_Q + 3]

    @property
    def x_ee(self):
        return self.rows[:, K.L_EE : K.L_EE + 3]

    @property
    def peg_tip(self):
        return self.rows[:, K.L_PEG : K.L_PEG + 3]

    @property
    def x_d(self):
        return self.rows[:, K.L_XD : K.L_XD + 3]

    @property
    def r_g(self):
        return self.rows[:, K.L_RG]

    @property
    def r_a(self):
        return self.rows[:, K.L_RA]

    @property
    def r_h(self):
        return self.rows[:, K.L_RH]

    @property
    def success(self) -> bool:
        return self.final_status is TickStatus.SUCCESS

    @property
    def collisions(self) -> int:
        return int(np.sum(self.rows[:, K.L_PENETRATING])) if len(self) else 0

    def segment(self, start: int, stop: int) -> "EpisodeLog":
        """Rows ``[start, stop)`` as a log without a finishing status."""
        return EpisodeLog(self.rows[start:stop], TickStatus.RUNNING, self.fault, dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                out = [repr(float(v)) for v in row]
                out[K.L_STATUS] = TickStatus(int(row[K.L_STATUS])).name
                writer.writerow(out)


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

_EMPTY_TREE = compile_tree(BtNode(kind=NodeKind.ACTION, label="idle", behavior="run"), ())


def _kernel_args(policy):
    if isinstance(policy, TreePolicy):
        return (K.POLICY_TREE, *policy.compiled.arrays(), np.zeros(1), np.zeros(K.N_SIZE), 0)
    if isinstance(policy, NeuralPolicy):
        return (
            K.POLICY_NN,
            *_EMPTY_TREE.arrays(),
            np.asarray(policy.weights, float),
            policy.config.as_array(),
            policy.config.hidden,
        )
    raise TypeError(f"unsupported policy {type(policy).__name__}")


def simulate_summary(model_arr, world_arr, reward_arr, policy, q0, T: int, dt: float) -> np.ndarray:
    """Kernel summary only (no per-step log); the fast path used for learning."""
    return K.simulate(
        *_kernel_args(policy), model_arr, world_arr, reward_arr,
        np.asarray(q0, float), int(T), float(dt), np.zeros((1, K.L_SIZE)), False,
    )


def run_episode(
    model: ArmModel,
    world: WorldModel,
    policy,
    T: int,
    dt: float,
    q0,
    rewards: RewardSpec,
    backend: str = "kernel",
) -> EpisodeLog:
    """Simulate up to ``T`` control steps from joint configuration ``q0``.

    The episode ends early when the policy reports Success or Failure, or on
    a simulation fault (recorded in the log, status Failure).
    """
    if backend == "python":
        return _run_python(model, world, policy, T, dt, q0, rewards)
    if backend != "kernel":
        raise ValueError(f"unknown backend {backend!r}")
    log = np.zeros((max(int(T), 1), K.L_SIZE))
    summary = K.simulate(
        *_kernel_args(policy), model.as_array(), world.as_array(), rewards.as_array(),
        np.asarray(q0, float), int(T), float(dt), log, True,
    )
    n = int(summary[K.S_STEPS])
    return EpisodeLog(
        rows=log[:n].copy(),
        final_status=TickStatus(int(summary[K.S_STATUS])),
        fault=bool(summary[K.S_FAULT]),
        meta={"summary": summary},
    )


def _run_python(model, world, policy, T, dt, q0, rewards) -> EpisodeLog:
    ap = model.as_array()
    wp = world.as_array()
    rp = rewards.as_array()
    q = np.asarray(q0, float).copy()
    qd = np.zeros(3)
    ee = np.zeros(3)
    fk_position(ap, q, ee)
    peg = ee.copy()
    in_contact = captured = False
    att = np.zeros(ATT_SIZE)
    att[ATT_XD : ATT_XD + 3] = ee
    att[ATT_ACTIVE] = 0.0
    cmd = np.zeros(CMD_SIZE)
    cmd[:3] = ee
    cmd[3] = 1.0
    work = (np.zeros((6, 3)), np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(6))
    Rd = np.eye(3)
    bb = Blackboard()
    rows = []
    status = TickStatus.RUNNING
    fault = False
    t = 0.0
    for _ in range(int(T)):
        bb.end_effector_position = ee.copy()
        bb.peg_position = peg.copy()
        bb.contact_force_proxy = (world.surface_height - ee[2]) if in_contact else 0.0
        bb.elapsed_time = t
        bb.attractor_position = att[ATT_XD : ATT_XD + 3].copy()
        if isinstance(policy, TreePolicy):
            status = tick(policy.tree, bb, policy.theta)
            if bb.skill_command_out is not None:
                cmd = bb.skill_command_out.as_array()
        elif isinstance(policy, NeuralPolicy):
            cfg = policy.config
            cmd = np.zeros(CMD_SIZE)
            cmd[:3] = policy.target(peg)
            cmd[3] = cfg.path_velocity
            near = math.hypot(peg[0] - cfg.goal[0], peg[1] - cfg.goal[1]) < cfg.radius and peg[2] < cfg.goal[2] + cfg.radius
            status = TickStatus.SUCCESS if near else TickStatus.RUNNING
        else:
            raise TypeError(f"unsupported policy {type(policy).__name__}")
        if status is not TickStatus.RUNNING:
            break
        attractor_update(att, cmd, dt)
        qn = np.zeros(3)
        qdn = np.zeros(3)
        ok = control_update(ap, q, qd, att[ATT_XD : ATT_XD + 3], Rd, dt, *work, qn, qdn)
        if not ok:
            fault = True
            status = TickStatus.FAILURE
            break
        q, qd = qn, qdn
        fk_position(ap, q, ee)
        v_s = cmd[CMD_VS] if cmd[CMD_HAS_OVERLAY] > 0.5 else 0.0
        new_peg = np.zeros(3)
        in_contact, captured = contact_update(wp, ee, att[ATT_XD + 2], v_s, peg, in_contact, captured, new_peg)
        peg = new_peg
        t += dt
        terms = np.zeros(3)
        step_terms(rp, wp, peg, terms)
        penetrating = obstacle_distance(wp, peg) <= 0.0
        row = np.zeros(K.L_SIZE)
        row[K.L_T] = t
        row[K.L_Q : K.L_Q + 3] = q
        row[K.L_EE : K.L_EE + 3] = ee
        row[K.L_PEG : K.L_PEG + 3] = peg
        row[K.L_XD : K.L_XD + 3] = att[ATT_XD : ATT_XD + 3]
        row[K.L_GOAL : K.L_GOAL + 3] = cmd[:3]
        row[K.L_VP] = cmd[3]
        row[K.L_VS] = v_s
        row[K.L_RG : K.L_RH + 1] = terms
        row[K.L_STATUS] = int(status)
        row[K.L_CONTACT] = float(in_contact)
        row[K.L_CAPTURED] = float(captured)
        row[K.L_PENETRATING] = float(penetrating)
        rows.append(row)
    return EpisodeLog(
        rows=np.array(rows).reshape(-1, K.L_SIZE),
        final_status=TickStatus(int(status)),
        fault=fault,
    )
