"""Task definitions: obstacle avoidance, peg-in-hole and the spliced combination.

Geometry (metres, robot base at the origin, all motion in the plane y = 0.5):

* a box obstacle ``x in [-0.05, 0.05]``, ``z in [0, 0.25]`` separates the
  start region (around x = -0.25) from the hole at ``(0.22, 0.5)``;
* the table surface is at ``z = 0.05`` and the hole is 40 mm deep with
  2.5 mm radial clearance;
* the peg-in-hole evaluation grid is 15 poses 40 cm above the hole.

These numbers are representative rather than measured from a real cell.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .bt import (
    BtNode,
    ConfigurationError,
    NodeKind,
    ParamSlot,
    SlotRole,
    bind_params,
    find,
    from_dict,
    max_bound_index,
    offset_bindings,
    splice,
    to_dict,
    tree_hash,
    validate,
)
from .cmaes import ParamSpace
from .episode import NNConfig, nn_param_count
from .harness import EpisodeResult, LearningRun, RandomizationSpec, Task, run_scored_episode
from .rewards import RewardSpec
from .sim import ArmModel, Box, WorldModel

SURFACE = 0.05
HOLE_XY = (0.22, 0.5)
PLANE_Y = 0.5
OBSTACLE = Box(center=(0.0, 0.5, 0.125), half_extents=(0.05, 0.2, 0.125))
HOLE_APPROACH = (0.22, 0.5, 0.09)
NEAR_RADIUS = 0.03
OBSTACLE_START = (-0.25, 0.5, 0.10)
OBSTACLE_START_HALF = (0.03, 0.03, 0.03)
HOLE_TOLERANCE = 0.010
INSERT_DEPTH = 0.010
GRID_HEIGHT = 0.40

OBSTACLE_BONUS = 5e4
OBSTACLE_GOAL_WEIGHT = 100.0
OBSTACLE_POPSIZE = 18
NN_WEIGHT_BOUND = 5.0

OBSTACLE_SPACE = ParamSpace(
    names=("p1", "p2", "g1.x", "g1.z", "g2.x", "g2.z"),
    lower=(0.05, -0.30, -0.30, 0.05, -0.30, 0.05),
    upper=(0.35, 0.20, 0.30, 0.45, 0.30, 0.45),
    units=("m",) * 6,
)
PEG_SPACE = ParamSpace(
    names=("g3.z", "v_s"),
    lower=(SURFACE - 0.016, 0.0005),
    upper=(SURFACE - 0.003, 0.008),
    units=("m", "m/s"),
)

NN_WORKSPACE_CENTER = (0.0, PLANE_Y, 0.25)
NN_WORKSPACE_HALF = (0.30, 0.0, 0.20)


def load_packaged_tree(name: str) -> BtNode:
    text = resources.files("btms").joinpath("trees", f"{name}.json").read_text()
    root = from_dict(json.loads(text))
    validate(root)
    return root


def peg_grid(hole_xy: Sequence[float] = HOLE_XY, height: float = SURFACE + GRID_HEIGHT) -> list[tuple[float, float, float]]:
    """15 start poses: one directly above the hole, then 14 with 2-5 cm horizontal offsets."""
    poses = [(hole_xy[0], hole_xy[1], height)]
    radii = (0.02, 0.03, 0.04, 0.05)
    for k in range(14):
        r = radii[k % 4]
        a = 2 * math.pi * k / 14
        poses.append((hole_xy[0] + r * math.cos(a), hole_xy[1] + r * math.sin(a), height))
    return poses


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    id: str
    task: Task
    space: ParamSpace
    train: RandomizationSpec
    T: int
    dt: float
    eval_T: int
    evals_per_candidate: int = 5
    initial_mean: tuple[float, ...] | None = None
    sigma0: float = 0.3
    popsize: int | None = None
    baselines: tuple[str, ...] = ()
    eval_displacement: float = 0.0
    eval_starts: tuple[tuple[float, float, float], ...] | None = None  # fixed held-out grid, else drawn from the training box

    @property
    def tree(self) -> BtNode | None:
        return self.task.tree

    def learning_run(self, budget: int, seed: int = 0, evals: int | None = None, **kw) -> LearningRun:
        return LearningRun(
            scenario=self.id,
            max_evaluations=budget,
            evals_per_candidate=self.evals_per_candidate if evals is None else evals,
            T=self.T,
            dt=self.dt,
            seed=seed,
            sigma0=self.sigma0,
            popsize=self.popsize,
            **kw,
        )

    def randomization(self, seed: int) -> RandomizationSpec:
        return replace(self.train, seed=seed)

    def check_bijection(self) -> None:
        if self.tree is None:
            return
        bound = {}
        for node in self.tree.walk():
            for s in node.params:
                if s.bound_index is not None:
                    bound.setdefault(s.bound_index, s.name)
        expected = dict(enumerate(self.space.names))
        if bound != expected:
            raise ConfigurationError(f"tree slots {bound} do not match parameter space {expected}")


def obstacle_world() -> WorldModel:
    return WorldModel(obstacle=OBSTACLE, surface_height=SURFACE, hole_center=HOLE_XY)


def obstacle_rewards() -> RewardSpec:
    return RewardSpec(goal=HOLE_APPROACH, finish_bonus=OBSTACLE_BONUS, w_goal=OBSTACLE_GOAL_WEIGHT, w_hole=0.0)


def peg_rewards(T: int) -> RewardSpec:
    goal = (HOLE_XY[0], HOLE_XY[1], SURFACE - 0.015)
    spec = RewardSpec(goal=goal, w_avoid=0.0)
    per_step = math.exp(-spec.d_g / (2 * spec.sigma_c**2)) + 1 / (2 * spec.d_h)
    return replace(spec, finish_bonus=T * per_step)


def build_obstacle_scenario() -> Scenario:
    tree = load_packaged_tree("obstacle")
    task = Task(ArmModel(), obstacle_world(), obstacle_rewards(), tree=tree, require_no_collision=True)
    sc = Scenario(
        id="obstacle",
        task=task,
        space=OBSTACLE_SPACE,
        train=RandomizationSpec((OBSTACLE_START,), OBSTACLE_START_HALF),
        T=1000,
        dt=0.01,
        eval_T=1000,
        popsize=OBSTACLE_POPSIZE,
        baselines=("nn",),
    )
    sc.check_bijection()
    return sc


def build_nn_obstacle_scenario(hidden: int = 10) -> Scenario:
    cfg = NNConfig(
        goal=HOLE_APPROACH,
        radius=NEAR_RADIUS,
        path_velocity=0.25,
        center=NN_WORKSPACE_CENTER,
        half=NN_WORKSPACE_HALF,
        hidden=hidden,
    )
    n = nn_param_count(3, hidden, 3)
    space = ParamSpace(
        names=tuple(f"w{i}" for i in range(n)),
        lower=(-NN_WEIGHT_BOUND,) * n,
        upper=(NN_WEIGHT_BOUND,) * n,
    )
    task = Task(ArmModel(), obstacle_world(), obstacle_rewards(), nn=cfg, require_no_collision=True)
    return Scenario(
        id="obstacle-nn",
        task=task,
        space=space,
        train=RandomizationSpec((OBSTACLE_START,), OBSTACLE_START_HALF),
        T=1000,
        dt=0.01,
        eval_T=1000,
        initial_mean=(0.0,) * n,
    )


def build_peg_scenario() -> Scenario:
    tree = load_packaged_tree("peg")
    T = 1200
    world = WorldModel(surface_height=SURFACE, hole_center=HOLE_XY)
    task = Task(ArmModel(), world, peg_rewards(T), tree=tree)
    sc = Scenario(
        id="peg",
        task=task,
        space=PEG_SPACE,
        train=RandomizationSpec(tuple(peg_grid()[:5]), hole_displacement=HOLE_TOLERANCE),
        T=T,
        dt=0.01,
        eval_T=2500,
        sigma0=0.5,
        baselines=("no-search", "random"),
        eval_displacement=HOLE_TOLERANCE,
        eval_starts=tuple(peg_grid()),
    )
    sc.check_bijection()
    return sc


def _prefix_names(root: BtNode, prefix: str) -> BtNode:
    def rename(s: ParamSlot) -> ParamSlot:
        return replace(s, name=prefix + s.name)

    return replace(
        root,
        params=tuple(rename(s) for s in root.params),
        children=tuple(_prefix_names(c, prefix) for c in root.children),
    )


def combine_trees(obstacle_tree: BtNode, peg_tree: BtNode, n_obstacle: int) -> BtNode:
    """Obstacle tree whose near-hole condition now gates the peg subtree."""
    near = find(obstacle_tree, "near_hole")
    sub = _prefix_names(offset_bindings(peg_tree, n_obstacle), "peg.")
    gated = BtNode(NodeKind.SEQUENCE, "near_hole_then_insert", children=(replace(near, label="at_hole"), sub))
    return splice(obstacle_tree, "near_hole", gated)


def build_combined_scenario(obstacle_policy: "PolicyFile", peg_policy: "PolicyFile") -> Scenario:
    if obstacle_policy.scenario != "obstacle" or peg_policy.scenario != "peg":
        raise ConfigurationError("combine needs an obstacle policy and a peg policy")
    obs, peg = build_obstacle_scenario(), build_peg_scenario()
    n_obs = obs.space.dims
    tree = combine_trees(obstacle_policy.tree, peg_policy.tree, n_obs)
    space = ParamSpace(
        obs.space.names + tuple("peg." + n for n in peg.space.names),
        obs.space.lower + peg.space.lower,
        obs.space.upper + peg.space.upper,
        obs.space.units + peg.space.units,
    )
    T = obs.T + 2 * peg.eval_T  # slow spirals at large offsets need the extra time
    world = obstacle_world()
    rewards = replace(obstacle_rewards(), w_hole=1.0)
    task = Task(ArmModel(), world, rewards, tree=tree, require_no_collision=True)
    sc = Scenario(
        id="combined",
        task=task,
        space=space,
        train=RandomizationSpec((OBSTACLE_START,), OBSTACLE_START_HALF),
        T=T,
        dt=0.01,
        eval_T=T,
        initial_mean=tuple(np.concatenate([obstacle_policy.theta, peg_policy.theta])),
    )
    sc.check_bijection()
    return sc


SCENARIOS = {
    "obstacle": build_obstacle_scenario,
    "obstacle-nn": build_nn_obstacle_scenario,
    "peg": build_peg_scenario,
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


# ---------------------------------------------------------------------------
# policy files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyFile:
    scenario: str
    theta: np.ndarray
    space: ParamSpace
    tree: BtNode | None
    tree_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "theta": [float(v) for v in self.theta],
            "space": self.space.to_dict(),
            "tree": None if self.tree is None else to_dict(self.tree),
            "tree_hash": None if self.tree is None else tree_hash(self.tree),
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def scenario_object(self) -> Scenario:
        if self.scenario == "combined":
            return combined_from_policy(self)
        return get_scenario(self.scenario)


def load_policy(path: str | Path) -> PolicyFile:
    """Read and verify a policy file.

    The stored tree must hash to the stored digest, and for the fixed
    scenarios it must be the packaged tree; parameters must lie in bounds.
    """
    try:
        doc = json.loads(Path(path).read_text())
        scenario = str(doc["scenario"])
        theta = np.asarray(doc["theta"], float)
        space = ParamSpace.from_dict(doc["space"])
        tree = None if doc.get("tree") is None else from_dict(doc["tree"])
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read policy file {path}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed policy file {path}: {exc}") from None
    if tree is not None:
        validate(tree)
        digest = tree_hash(tree)
        if digest != doc.get("tree_hash"):
            raise ConfigurationError(f"{path}: tree hash mismatch")
        if scenario in SCENARIOS:
            expected = get_scenario(scenario).tree
            if expected is not None and tree_hash(expected) != digest:
                raise ConfigurationError(f"{path}: tree differs from the {scenario!r} scenario tree")
        if max_bound_index(tree) + 1 != space.dims:
            raise ConfigurationError(f"{path}: tree binds {max_bound_index(tree) + 1} parameters, space has {space.dims}")
    try:
        space.check(theta)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return PolicyFile(scenario, theta, space, tree, None if tree is None else tree_hash(tree), doc.get("meta", {}))


def policy_for(scenario: Scenario, theta, **meta) -> PolicyFile:
    theta = scenario.space.check(np.asarray(theta, float))
    return PolicyFile(scenario.id, theta, scenario.space, scenario.tree, meta=meta)


def combined_from_policy(policy: PolicyFile) -> Scenario:
    obs = build_obstacle_scenario()
    n = obs.space.dims
    parts = (
        PolicyFile("obstacle", policy.theta[:n], obs.space, obs.tree),
        PolicyFile("peg", policy.theta[n:], PEG_SPACE, load_packaged_tree("peg")),
    )
    sc = build_combined_scenario(*parts)
    if policy.tree is not None and tree_hash(policy.tree) != tree_hash(sc.tree):
        raise ConfigurationError("combined policy tree does not match its recombined parts")
    return sc


def combine_policies(obstacle_policy: PolicyFile, peg_policy: PolicyFile) -> PolicyFile:
    sc = build_combined_scenario(obstacle_policy, peg_policy)
    theta = np.concatenate([obstacle_policy.theta, peg_policy.theta])
    return policy_for(sc, theta)


def describe(policy: PolicyFile) -> str:
    """Parameter report: one ``name = value unit`` line per learned parameter (values round-trip)."""
    lines = [f"scenario: {policy.scenario}"]
    if policy.tree is not None:
        lines.append(f"tree: {tree_hash(policy.tree)}")
    for i, name in enumerate(policy.space.names):
        unit = policy.space.unit(i)
        lines.append(f"{name} = {float(policy.theta[i])!r}{' ' + unit if unit else ''}")
    return "\n".join(lines)


def parse_description(text: str, names: Sequence[str]) -> np.ndarray:
    values = {}
    for line in text.splitlines():
        if " = " in line:
            key, rest = line.split(" = ", 1)
            values[key.strip()] = float(rest.split()[0])
    return np.array([values[n] for n in names])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    start: tuple[float, float, float]
    displacement: tuple[float, float]


@dataclass
class EvaluationReport:
    scenario: str
    trials: list[Trial]
    results: list[EpisodeResult]
    wall_time: float = 0.0

    @property
    def successes(self) -> list[bool]:
        return [r.success for r in self.results]

    @property
    def returns(self) -> list[float]:
        return [r.ret for r in self.results]

    @property
    def collisions(self) -> int:
        return sum(r.collisions for r in self.results)

    @property
    def rate(self) -> float:
        return sum(self.successes) / len(self.results) if self.results else 0.0

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "trials": len(self.results),
            "successes": int(sum(self.successes)),
            "success_rate": self.rate,
            "collisions": self.collisions,
            "mean_return": float(np.mean(self.returns)) if self.results else 0.0,
            "wall_time": self.wall_time,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "start.x", "start.y", "start.z", "dx", "dy", "success", "return", "collisions", "steps", "fault"])
            for i, (t, r) in enumerate(zip(self.trials, self.results)):
                w.writerow([i, *map(repr, t.start), *map(repr, t.displacement), int(r.success), repr(r.ret), r.collisions, r.steps, int(r.fault)])


def default_trials(scenario: Scenario, n: int | None = None, seed: int = 0, displacement: float | None = None) -> list[Trial]:
    """Held-out trials.  Scenarios with ``eval_starts`` cycle through that grid;
    the others draw starts from the training box.  Streams differ from training seeds."""
    d = scenario.eval_displacement if displacement is None else displacement
    rng = np.random.default_rng([0xE7A1, int(seed)])
    if scenario.eval_starts:
        grid = scenario.eval_starts
        n = len(grid) if n is None else n
        starts = [grid[i % len(grid)] for i in range(n)]
    else:
        n = 20 if n is None else n
        c = np.asarray(scenario.train.start_positions[0])
        h = np.asarray(scenario.train.start_half)
        starts = [tuple(float(v) for v in c + rng.uniform(-1, 1, 3) * h) for _ in range(n)]
    trials = []
    for s in starts:
        disp = (float(rng.uniform(-d, d)), float(rng.uniform(-d, d))) if d > 0 else (0.0, 0.0)
        trials.append(Trial(tuple(s), disp))
    return trials


def misalignment_trials(level: float, start=OBSTACLE_START) -> list[Trial]:
    """Combined-task sweep: 4 axis and 4 diagonal hole offsets of size ``level`` (one trial at 0)."""
    if level == 0:
        return [Trial(tuple(start), (0.0, 0.0))]
    offs = [(level, 0.0), (-level, 0.0), (0.0, level), (0.0, -level)]
    offs += [(sx * level, sy * level) for sx in (1, -1) for sy in (1, -1)]
    return [Trial(tuple(start), (float(dx), float(dy))) for dx, dy in offs]


def evaluate(scenario: Scenario, theta, trials: Sequence[Trial], T: int | None = None) -> EvaluationReport:
    t0 = time.perf_counter()
    policy = scenario.task.policy(theta)
    T = scenario.eval_T if T is None else T
    results = [run_scored_episode(scenario.task, policy, tr.start, tr.displacement, T, scenario.dt) for tr in trials]
    return EvaluationReport(scenario.id, list(trials), results, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# peg baselines
# ---------------------------------------------------------------------------


def no_search_theta(space: ParamSpace = PEG_SPACE) -> np.ndarray:
    """Straight descent: deepest commanded goal, spiral disabled."""
    return np.array([space.lower[0], 0.0])


def random_thetas(space: ParamSpace, n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng([0xBA5E, int(seed)])
    return [space.from_unit(rng.random(space.dims)) for _ in range(n)]
