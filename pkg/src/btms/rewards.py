"""Shaped reward terms and the episode return.

All terms are scored at the peg tip.  Per step::

    r_g = exp(-(|p - p_goal| + d_g) / (2 sigma_c^2))
    r_a = -1 / (d_obstacle + d_a)^2
    r_h = 1 / (2 (d_hole + d_h))

and the return is the weighted per-step sum plus a fixed bonus when the
tree's root reported success.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .sim import WorldModel, hole_region_distance, obstacle_distance

# reward parameter layout
R_SIGMA, R_DG, R_DA, R_DH = 0, 1, 2, 3
R_GOAL = 4
R_WG, R_WA, R_WH = 7, 8, 9
R_BONUS = 10
R_SIZE = 11


@dataclass(frozen=True)
class RewardSpec:
    goal: tuple[float, float, float]
    sigma_c: float = 0.4
    d_g: float = 0.25
    d_a: float = 0.03
    d_h: float = 0.006
    finish_bonus: float = 0.0
    w_goal: float = 1.0
    w_avoid: float = 1.0
    w_hole: float = 1.0

    def __post_init__(self):
        if not (self.sigma_c > 0 and self.d_a > 0 and self.d_h > 0):
            raise ValueError("sigma_c, d_a and d_h must be positive")
        if not all(math.isfinite(w) for w in (self.w_goal, self.w_avoid, self.w_hole, self.finish_bonus)):
            raise ValueError("weights must be finite")

    def as_array(self) -> np.ndarray:
        rp = np.zeros(R_SIZE)
        rp[R_SIGMA] = self.sigma_c
        rp[R_DG] = self.d_g
        rp[R_DA] = self.d_a
        rp[R_DH] = self.d_h
        rp[R_GOAL : R_GOAL + 3] = self.goal
        rp[R_WG] = self.w_goal
        rp[R_WA] = self.w_avoid
        rp[R_WH] = self.w_hole
        rp[R_BONUS] = self.finish_bonus
        return rp


@dataclass(frozen=True)
class RewardBreakdown:
    r_g: float
    r_a: float
    r_h: float
    r_finish: float
    total: float


@njit(cache=True)
def goal_term(distance, sigma_c, d_g):
    return math.exp(-(distance + d_g) / (2.0 * sigma_c * sigma_c))


@njit(cache=True)
def avoid_term(distance, d_a):
    s = distance + d_a
    return -1.0 / (s * s)


@njit(cache=True)
def hole_term(distance, d_h):
    return 1.0 / (2.0 * (distance + d_h))


@njit(cache=True)
def step_terms(rp, wp, p, out):
    """Unweighted ``(r_g, r_a, r_h)`` for tip position ``p``; inactive terms are 0."""
    dx = p[0] - rp[R_GOAL]
    dy = p[1] - rp[R_GOAL + 1]
    dz = p[2] - rp[R_GOAL + 2]
    out[0] = goal_term(math.sqrt(dx * dx + dy * dy + dz * dz), rp[R_SIGMA], rp[R_DG]) if rp[R_WG] != 0.0 else 0.0
    d_obs = obstacle_distance(wp, p)
    out[1] = avoid_term(d_obs, rp[R_DA]) if (rp[R_WA] != 0.0 and math.isfinite(d_obs)) else 0.0
    out[2] = hole_term(hole_region_distance(wp, p), rp[R_DH]) if rp[R_WH] != 0.0 else 0.0


def goal_reward(p_peg, spec: RewardSpec) -> float:
    d = float(np.linalg.norm(np.asarray(p_peg, float) - np.asarray(spec.goal, float)))
    return float(goal_term(d, spec.sigma_c, spec.d_g))


def collision_penalty(p_peg, world: WorldModel, spec: RewardSpec) -> float:
    d = float(obstacle_distance(world.as_array(), np.asarray(p_peg, float)))
    return float(avoid_term(d, spec.d_a)) if math.isfinite(d) else 0.0


def hole_reward(p_peg, world: WorldModel, spec: RewardSpec) -> float:
    d = float(hole_region_distance(world.as_array(), np.asarray(p_peg, float)))
    return float(hole_term(d, spec.d_h))


def step_reward(p_peg, world: WorldModel, spec: RewardSpec) -> RewardBreakdown:
    terms = np.zeros(3)
    step_terms(spec.as_array(), world.as_array(), np.asarray(p_peg, float), terms)
    total = spec.w_goal * terms[0] + spec.w_avoid * terms[1] + spec.w_hole * terms[2]
    return RewardBreakdown(terms[0], terms[1], terms[2], 0.0, total)


def episode_return(log, spec: RewardSpec) -> float:
    """Sum of weighted per-step terms over ``log`` plus the finish bonus on success."""
    if len(log) == 0:
        raise ValueError("empty episode log")
    shaped = (
        spec.w_goal * float(np.sum(log.r_g))
        + spec.w_avoid * float(np.sum(log.r_a))
        + spec.w_hole * float(np.sum(log.r_h))
    )
    return shaped + (spec.finish_bonus if log.success else 0.0)
