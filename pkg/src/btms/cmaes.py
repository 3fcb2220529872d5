"""CMA-ES with BIPOP restarts, maximizing a (noisy) objective.

The search distribution lives in the unit cube: every parameter is mapped
affinely from ``[lower, upper]`` to ``[0, 1]`` and infeasible samples are
mirrored back inside.  Everything here maximizes; there is no sign flip in
the interface.

Typical use is ask/tell through :class:`Bipop`::

    opt = Bipop(space, budget=5000, seed=1)
    while not opt.done:
        thetas = opt.ask()
        opt.tell([f(t) for t in thetas])
    theta_star = opt.final_parameters()
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

TOL_FUN = 1e-10
TOL_SIGMA = 1e-12
MAX_CONDITION = 1e14
TOL_STAGNATION = 1e-2  # relative gain below which a long horizon counts as stalled


@dataclass(frozen=True)
class ParamSpace:
    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    units: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.names)
        if n == 0:
            raise ValueError("parameter space needs at least one dimension")
        if len(self.lower) != n or len(self.upper) != n:
            raise ValueError("names, lower and upper must have equal length")
        if self.units and len(self.units) != n:
            raise ValueError("units must be empty or one per dimension")
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad bounds for {name!r}: [{lo}, {hi}]")
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))

    @property
    def dims(self) -> int:
        return len(self.names)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    def unit(self, i: int) -> str:
        return self.units[i] if self.units else ""

    def to_unit(self, theta) -> np.ndarray:
        return (np.asarray(theta, float) - self.lo) / (self.hi - self.lo)

    def from_unit(self, u) -> np.ndarray:
        return self.lo + np.asarray(u, float) * (self.hi - self.lo)

    def contains(self, theta) -> bool:
        t = np.asarray(theta, float)
        return t.shape == (self.dims,) and bool(np.all(t >= self.lo) and np.all(t <= self.hi))

    def check(self, theta) -> np.ndarray:
        t = np.asarray(theta, float)
        if t.shape != (self.dims,):
            raise ValueError(f"expected {self.dims} parameters, got shape {t.shape}")
        bad = [n for n, v, lo, hi in zip(self.names, t, self.lower, self.upper) if not lo <= v <= hi]
        if bad:
            raise ValueError(f"parameters out of bounds: {', '.join(bad)}")
        return t

    def concat(self, other: "ParamSpace") -> "ParamSpace":
        units = (self.units or ("",) * self.dims) + (other.units or ("",) * other.dims)
        return ParamSpace(self.names + other.names, self.lower + other.lower, self.upper + other.upper, units)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "lower": list(self.lower),
            "upper": list(self.upper),
            "units": list(self.units),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpace":
        return cls(tuple(d["names"]), tuple(d["lower"]), tuple(d["upper"]), tuple(d.get("units", ())))


def mirror_unit(u: np.ndarray) -> np.ndarray:
    """Reflect values into [0, 1] (period-2 mirroring)."""
    y = np.mod(u, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def default_popsize(n: int) -> int:
    return 4 + int(3 * math.log(n))


@dataclass(frozen=True)
class Strategy:
    """Learning rates and recombination weights for given ``(n, lam, mu)``."""

    n: int
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @classmethod
    def make(cls, n: int, lam: int, mu: int | None = None, equal_weights: bool = False) -> "Strategy":
        if lam < 4:
            raise ValueError("population size must be at least 4")
        mu = lam // 2 if mu is None else mu
        if not 1 <= mu <= lam:
            raise ValueError("need 1 <= mu <= lambda")
        if equal_weights:
            w = np.full(mu, 1.0 / mu)
        else:
            w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
            w /= w.sum()
        mueff = 1.0 / float(np.sum(w * w))
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        return cls(n, lam, mu, w, mueff, cc, cs, c1, cmu, damps, chi_n)


@dataclass(frozen=True)
class CmaState:
    """Search distribution ``N(mean, sigma^2 C)`` in unit-cube coordinates."""

    space: ParamSpace
    strategy: Strategy
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    B: np.ndarray
    D: np.ndarray
    generation: int = 0

    @property
    def lam(self) -> int:
        return self.strategy.lam

    @property
    def mu(self) -> int:
        return self.strategy.mu

    @property
    def condition(self) -> float:
        return float((self.D.max() / self.D.min()) ** 2)

    @property
    def mean_params(self) -> np.ndarray:
        return self.space.from_unit(self.mean)


def _decompose(C: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrize and eigendecompose, repairing to the nearest SPD matrix if needed."""
    C = 0.5 * (C + C.T)
    try:
        evals, B = np.linalg.eigh(C)
        ok = np.all(np.isfinite(evals))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        log.warning("covariance decomposition failed; resetting to identity")
        n = C.shape[0]
        return np.eye(n), np.eye(n), np.ones(n)
    floor = max(float(evals.max()), 1.0) * 1e-20
    if evals.min() <= floor:
        log.warning("covariance not positive definite (min eigenvalue %g); repairing", evals.min())
        evals = np.maximum(evals, floor)
        C = (B * evals) @ B.T
        C = 0.5 * (C + C.T)
    return C, B, np.sqrt(evals)


def new_state(
    space: ParamSpace,
    mean=None,
    sigma: float = 0.3,
    lam: int | None = None,
    mu: int | None = None,
    equal_weights: bool = False,
) -> CmaState:
    """Fresh state; ``mean`` is in parameter units (default: box centre), ``sigma`` in unit-cube units."""
    n = space.dims
    strat = Strategy.make(n, default_popsize(n) if lam is None else lam, mu, equal_weights)
    m = np.full(n, 0.5) if mean is None else space.to_unit(space.check(mean))
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return CmaState(space, strat, m, float(sigma), np.eye(n), np.zeros(n), np.zeros(n), np.eye(n), np.ones(n))


def sample_population(state: CmaState, rng: np.random.Generator) -> list[np.ndarray]:
    """``lam`` draws from ``N(m, sigma^2 C)``, mirrored into bounds, in parameter units."""
    z = rng.standard_normal((state.lam, state.space.dims))
    u = state.mean + state.sigma * (z * state.D) @ state.B.T
    u = mirror_unit(u)
    return [state.space.from_unit(row) for row in u]


def _fitness_key(J: float) -> float:
    return J if math.isfinite(J) else -math.inf


def update(state: CmaState, ranked: Sequence[tuple[np.ndarray, float]]) -> CmaState:
    """One generation of selection and adaptation.

    ``ranked`` holds ``(theta, J)`` pairs for the complete population in any
    order; they are ranked by ``J`` (higher is better, non-finite worst, ties
    keep input order).  Only ranks enter the update.
    """
    s = state.strategy
    if len(ranked) != s.lam:
        raise ValueError(f"expected {s.lam} evaluated candidates, got {len(ranked)}")
    order = sorted(range(s.lam), key=lambda i: -_fitness_key(float(ranked[i][1])))
    Js = np.array([_fitness_key(float(ranked[i][1])) for i in order])
    X = np.array([state.space.to_unit(ranked[i][0]) for i in order])

    if Js[0] == Js[-1]:
        # flat fitness: no information about direction, widen the search
        sigma = state.sigma * math.exp(0.2 + s.cs / s.damps)
        return replace(state, sigma=sigma, generation=state.generation + 1)

    n = s.n
    Y = (X[: s.mu] - state.mean) / state.sigma
    yw = s.weights @ Y
    mean = state.mean + state.sigma * yw

    inv_sqrt = (state.B / state.D) @ state.B.T
    p_sigma = (1 - s.cs) * state.p_sigma + math.sqrt(s.cs * (2 - s.cs) * s.mueff) * (inv_sqrt @ yw)
    ps_norm = float(np.linalg.norm(p_sigma))
    gen = state.generation + 1
    hsig = ps_norm / math.sqrt(1 - (1 - s.cs) ** (2 * gen)) / s.chi_n < 1.4 + 2 / (n + 1)
    p_c = (1 - s.cc) * state.p_c + (math.sqrt(s.cc * (2 - s.cc) * s.mueff) * yw if hsig else 0.0)

    rank_one = np.outer(p_c, p_c)
    if not hsig:
        rank_one = rank_one + s.cc * (2 - s.cc) * state.C
    rank_mu = (Y.T * s.weights) @ Y
    C = (1 - s.c1 - s.cmu) * state.C + s.c1 * rank_one + s.cmu * rank_mu
    sigma = state.sigma * math.exp((s.cs / s.damps) * (ps_norm / s.chi_n - 1))
    sigma = min(sigma, 1e3)
    C, B, D = _decompose(C)
    return CmaState(state.space, s, mean, sigma, C, p_sigma, p_c, B, D, gen)


# ---------------------------------------------------------------------------
# restarts
# ---------------------------------------------------------------------------


class Regime(str, enum.Enum):
    LARGE = "large"
    SMALL = "small"


@dataclass(frozen=True)
class RestartDecision:
    restart: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.restart


def stagnation_window(dims: int, lam: int) -> int:
    return 10 + math.ceil(30 * dims / lam)


def stagnation_horizon(dims: int, lam: int) -> int:
    return 50 + math.ceil(30 * dims / lam)


def should_restart(state: CmaState, history: Sequence[float]) -> RestartDecision:
    """``history`` holds the best J of every generation of the current run.

    Besides the flat-fitness and collapse tests, a run restarts when the
    median best J of the latest fifth of the stagnation horizon beats that of
    the earliest fifth by less than ``TOL_STAGNATION`` relative; noisy
    objectives never go flat.
    """
    if state.sigma < TOL_SIGMA:
        return RestartDecision(True, "sigma")
    if state.condition > MAX_CONDITION:
        return RestartDecision(True, "condition")
    w = stagnation_window(state.space.dims, state.lam)
    if len(history) >= w:
        tail = np.asarray(history[-w:], float)
        if np.all(np.isfinite(tail)) and float(tail.max() - tail.min()) < TOL_FUN:
            return RestartDecision(True, "flat")
    h = stagnation_horizon(state.space.dims, state.lam)
    if len(history) >= h:
        tail = np.asarray(history[-h:], float)
        k = max(1, h // 5)
        early, late = float(np.median(tail[:k])), float(np.median(tail[-k:]))
        if not late - early > TOL_STAGNATION * abs(early):
            return RestartDecision(True, "stagnation")
    return RestartDecision(False)


@dataclass
class RestartSchedule:
    """BIPOP bookkeeping.  The first run counts toward the large-population budget."""

    lam0: int
    sigma0: float
    regime: Regime = Regime.LARGE
    restart_count: int = 0
    large_restarts: int = 0
    budget_used: int = 0
    large_budget: int = 0
    small_budget: int = 0

    def charge(self, evals: int) -> None:
        self.budget_used += evals
        if self.regime is Regime.LARGE:
            self.large_budget += evals
        else:
            self.small_budget += evals

    @property
    def large_lam(self) -> int:
        return self.lam0 * 2**self.large_restarts

    def next_run(self, rng: np.random.Generator) -> tuple[int, float]:
        """Pick the regime for the next run and return its ``(lam, sigma)``."""
        self.restart_count += 1
        if self.large_budget <= self.small_budget:
            self.regime = Regime.LARGE
            self.large_restarts += 1
            return self.large_lam, self.sigma0
        self.regime = Regime.SMALL
        u = rng.random()
        lam = int(self.lam0 * (0.5 * self.large_lam / self.lam0) ** (u * u))
        return max(lam, self.lam0), self.sigma0 * 10 ** (-2 * rng.random())


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

TRACE_HEADER = ["k", "run", "regime", "lambda", "sigma", "best_J", "mean_J", "best_so_far", "evals"]


@dataclass
class RunRecord:
    run: int
    regime: Regime
    lam: int
    best_J: float = -math.inf
    best_theta: np.ndarray | None = None
    last_mean: np.ndarray | None = None
    last_median_J: float = -math.inf
    generations: int = 0


@dataclass
class TraceRow:
    k: int
    run: int
    regime: str
    lam: int
    sigma: float
    best_J: float
    mean_J: float
    best_so_far: float
    evals: int
    mean: np.ndarray

    def cells(self) -> list[str]:
        vals = [self.k, self.run, self.regime, self.lam]
        vals += [repr(float(v)) for v in (self.sigma, self.best_J, self.mean_J, self.best_so_far)]
        vals += [self.evals] + [repr(float(v)) for v in self.mean]
        return [str(v) for v in vals]


class Bipop:
    """Ask/tell BIPOP-CMA-ES over ``space`` with an evaluation budget.

    A run ends on a restart trigger; the next run is chosen by
    :class:`RestartSchedule`.  Restarted runs start from a uniform random mean.
    The optimizer stops when the remaining budget cannot pay for a whole
    population.
    """

    def __init__(
        self,
        space: ParamSpace,
        budget: int,
        seed: int | np.random.SeedSequence = 0,
        mean=None,
        sigma0: float = 0.3,
        lam0: int | None = None,
        equal_weights: bool = False,
        restarts: bool = True,
        target: float | None = None,
    ):
        if budget < 0:
            raise ValueError("budget must be non-negative")
        self.space = space
        self.budget = int(budget)
        self.rng = np.random.default_rng(seed)
        self.equal_weights = equal_weights
        self.allow_restarts = restarts
        self.target = target
        self.state = new_state(space, mean, sigma0, lam0, equal_weights=equal_weights)
        self.schedule = RestartSchedule(self.state.lam, sigma0)
        self.runs: list[RunRecord] = [RunRecord(0, Regime.LARGE, self.state.lam, last_mean=self.state.mean_params)]
        self.history: list[float] = []
        self.trace: list[TraceRow] = []
        self.evals = 0
        self.generations = 0
        self.best_J = -math.inf
        self.best_theta: np.ndarray | None = None
        self._pending: list[np.ndarray] | None = None
        self._stopped = False

    @property
    def done(self) -> bool:
        if self._stopped:
            return True
        if self.target is not None and self.best_J >= self.target:
            return True
        return self.budget - self.evals < self.state.lam

    @property
    def run(self) -> RunRecord:
        return self.runs[-1]

    @property
    def restart_count(self) -> int:
        return self.schedule.restart_count

    def ask(self) -> list[np.ndarray]:
        if self.done:
            raise RuntimeError("optimizer is done")
        if self._pending is None:
            self._pending = sample_population(self.state, self.rng)
        return list(self._pending)

    def tell(self, fitness: Sequence[float]) -> None:
        if self._pending is None:
            raise RuntimeError("tell() without ask()")
        thetas = self._pending
        self._pending = None
        Js = [float(j) for j in fitness]
        if len(Js) != len(thetas):
            raise ValueError("one fitness value per candidate required")
        self.evals += len(Js)
        self.schedule.charge(len(Js))
        keys = [_fitness_key(j) for j in Js]
        ibest = int(np.argmax(keys))
        gen_best = keys[ibest]
        if gen_best > self.best_J or self.best_theta is None:
            self.best_J, self.best_theta = gen_best, thetas[ibest].copy()
        run = self.run
        if gen_best > run.best_J or run.best_theta is None:
            run.best_J, run.best_theta = gen_best, thetas[ibest].copy()

        self.state = update(self.state, list(zip(thetas, Js)))
        run.last_mean = self.state.mean_params
        run.last_median_J = float(np.median(keys))
        run.generations += 1
        self.history.append(gen_best)
        finite = [j for j in Js if math.isfinite(j)]
        self.trace.append(
            TraceRow(
                k=self.generations,
                run=run.run,
                regime=run.regime.value,
                lam=self.state.lam,
                sigma=self.state.sigma,
                best_J=gen_best,
                mean_J=float(np.mean(finite)) if finite else -math.inf,
                best_so_far=self.best_J,
                evals=self.evals,
                mean=run.last_mean,
            )
        )
        self.generations += 1

        decision = should_restart(self.state, self.history)
        if decision:
            if not self.allow_restarts:
                self._stopped = True
                return
            log.info("restart after %d generations (%s)", run.generations, decision.reason)
            lam, sigma = self.schedule.next_run(self.rng)
            mean = self.space.from_unit(self.rng.random(self.space.dims))
            self.state = new_state(self.space, mean, sigma, lam, equal_weights=self.equal_weights)
            self.history = []
            self.runs.append(RunRecord(len(self.runs), self.schedule.regime, lam, last_mean=self.state.mean_params))

    def final_parameters(self) -> np.ndarray:
        """Mean of the last population of the best run (not the best offspring).

        Runs are compared by the median J of their final generation, which
        tracks the quality of the final mean and is not fooled by a single
        lucky sample of a noisy objective.  Runs that never completed a
        generation are skipped; with none completed the initial mean is
        returned.
        """
        done = [r for r in self.runs if r.generations > 0]
        if not done:
            return self.runs[0].last_mean.copy()
        best = max(done, key=lambda r: r.last_median_J)  # first run wins ties
        return np.clip(best.last_mean, self.space.lo, self.space.hi)

    def write_trace(self, path: str | Path) -> None:
        write_trace(self.trace, self.space, path)


def final_parameters(state: CmaState) -> np.ndarray:
    """Mean of the given state's last population, in parameter units."""
    return np.clip(state.mean_params, state.space.lo, state.space.hi)


def write_trace(rows: Sequence[TraceRow], space: ParamSpace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER + [f"m.{n}" for n in space.names])
        for row in rows:
            w.writerow(row.cells())


def maximize(
    f: Callable[[np.ndarray], float],
    space: ParamSpace,
    budget: int,
    seed: int = 0,
    **kwargs,
) -> Bipop:
    """Convenience loop for cheap objectives; returns the finished optimizer."""
    opt = Bipop(space, budget, seed, **kwargs)
    while not opt.done:
        thetas = opt.ask()
        opt.tell([f(t) for t in thetas])
    return opt
