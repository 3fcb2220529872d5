"""Parametric movement skills.

A skill moves the virtual equilibrium ``x_d`` along the straight line from
where it was when the goal was set to the commanded goal, at path velocity
``v_p``.  An optional Archimedes spiral is overlaid in the horizontal plane
for hole search.

The numeric cores (:func:`spiral_increment`, :func:`attractor_update`) are
numba functions over flat arrays so the episode kernel can call them; the
dataclass API wraps them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

# attractor state array layout
ATT_XD = 0
ATT_BASE = 3
ATT_START = 6
ATT_GOAL = 9
ATT_PROGRESS = 12
ATT_HAS_OVERLAY = 13
ATT_RADIUS = 14
ATT_ANGLE = 15
ATT_ACTIVE = 16
ATT_SIZE = 17

# command array layout
CMD_GOAL = 0
CMD_VP = 3
CMD_HAS_OVERLAY = 4
CMD_VS = 5
CMD_PITCH = 6
CMD_SIZE = 7


@njit(cache=True)
def spiral_increment(radius, arc, pitch):
    """One polar spiral step: returns ``(new_radius, dalpha)``."""
    if not radius > 0.0:
        raise ValueError("spiral radius must be positive")
    dalpha = arc / radius
    return radius + dalpha * pitch / TWO_PI, dalpha


@njit(cache=True)
def attractor_update(att, cmd, dt):
    """Advance the attractor state array ``att`` in place by one control step."""
    changed = att[ATT_ACTIVE] < 0.5
    for k in range(3):
        if cmd[CMD_GOAL + k] != att[ATT_GOAL + k]:
            changed = True
    overlay = cmd[CMD_HAS_OVERLAY] > 0.5
    had_overlay = att[ATT_HAS_OVERLAY] > 0.5

    if changed or (had_overlay and not overlay):
        # re-plan from the current equilibrium (overlay displacement is kept)
        for k in range(3):
            att[ATT_START + k] = att[ATT_XD + k]
            att[ATT_BASE + k] = att[ATT_XD + k]
            att[ATT_GOAL + k] = cmd[CMD_GOAL + k]
        att[ATT_PROGRESS] = 0.0
        att[ATT_ACTIVE] = 1.0
        att[ATT_HAS_OVERLAY] = 0.0
        had_overlay = False
    if overlay and not had_overlay:
        att[ATT_HAS_OVERLAY] = 1.0
        att[ATT_RADIUS] = 0.25 * cmd[CMD_PITCH]
        att[ATT_ANGLE] = 0.0

    dx = att[ATT_GOAL] - att[ATT_START]
    dy = att[ATT_GOAL + 1] - att[ATT_START + 1]
    dz = att[ATT_GOAL + 2] - att[ATT_START + 2]
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    progress = att[ATT_PROGRESS]
    if length > 0.0 and progress < 1.0:
        progress += cmd[CMD_VP] * dt / length
    if progress >= 1.0 or length == 0.0:
        progress = 1.0
        for k in range(3):
            att[ATT_BASE + k] = att[ATT_GOAL + k]
    else:
        att[ATT_BASE] = att[ATT_START] + progress * dx
        att[ATT_BASE + 1] = att[ATT_START + 1] + progress * dy
        att[ATT_BASE + 2] = att[ATT_START + 2] + progress * dz
    att[ATT_PROGRESS] = progress

    for k in range(3):
        att[ATT_XD + k] = att[ATT_BASE + k]
    if overlay:
        r, dalpha = spiral_increment(att[ATT_RADIUS], cmd[CMD_VS] * dt, cmd[CMD_PITCH])
        att[ATT_RADIUS] = r
        att[ATT_ANGLE] += dalpha
        att[ATT_XD] += r * math.cos(att[ATT_ANGLE])
        att[ATT_XD + 1] += r * math.sin(att[ATT_ANGLE])


# ---------------------------------------------------------------------------
# dataclass API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpiralOverlay:
    spiral_velocity: float
    pitch: float
    radius: float
    angle: float = 0.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def start(cls, spiral_velocity: float, pitch: float, center) -> "SpiralOverlay":
        """Fresh overlay at radius ``pitch / 4`` (avoids the singular start at r = 0)."""
        return cls(spiral_velocity, pitch, 0.25 * pitch, 0.0, np.asarray(center, float)[:2])

    @property
    def displacement(self) -> np.ndarray:
        return np.array([self.radius * math.cos(self.angle), self.radius * math.sin(self.angle)])


def step_spiral(ov: SpiralOverlay, dt: float = 1.0) -> SpiralOverlay:
    """Advance the spiral by an arc increment of ``spiral_velocity * dt``.

    With the default ``dt = 1`` this is the bare polar recursion
    ``dalpha = v_s / r``, ``r' = r + dalpha * c / (2 pi)``.
    """
    if not ov.radius > 0:
        raise ValueError(f"spiral radius must be positive, got {ov.radius}")
    r, dalpha = spiral_increment(ov.radius, ov.spiral_velocity * dt, ov.pitch)
    return SpiralOverlay(ov.spiral_velocity, ov.pitch, r, ov.angle + dalpha, ov.center)


@dataclass(frozen=True)
class AttractorCommand:
    goal: np.ndarray
    path_velocity: float
    overlay: SpiralOverlay | None = None
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        goal = np.asarray(self.goal, float)
        if goal.shape != (3,) or not np.all(np.isfinite(goal)):
            raise ValueError(f"goal must be a finite 3-vector, got {self.goal!r}")
        if not self.path_velocity > 0:
            raise ValueError(f"path velocity must be positive, got {self.path_velocity}")
        object.__setattr__(self, "goal", goal)

    def as_array(self) -> np.ndarray:
        out = np.zeros(CMD_SIZE)
        out[CMD_GOAL : CMD_GOAL + 3] = self.goal
        out[CMD_VP] = self.path_velocity
        if self.overlay is not None:
            out[CMD_HAS_OVERLAY] = 1.0
            out[CMD_VS] = self.overlay.spiral_velocity
            out[CMD_PITCH] = self.overlay.pitch
        return out


@dataclass(frozen=True)
class AttractorState:
    """Virtual equilibrium plus path bookkeeping.

    Orientation is carried unchanged from the command; none of the tasks here
    re-orient the tool, so no slerp is applied.
    """

    x_d: np.ndarray
    path_start: np.ndarray
    path_progress: float = 0.0
    base: np.ndarray | None = None
    goal: np.ndarray | None = None
    overlay: SpiralOverlay | None = None
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def at(cls, position) -> "AttractorState":
        p = np.asarray(position, float).copy()
        return cls(x_d=p, path_start=p.copy(), base=p.copy())

    def as_array(self) -> np.ndarray:
        att = np.zeros(ATT_SIZE)
        att[ATT_XD : ATT_XD + 3] = self.x_d
        att[ATT_BASE : ATT_BASE + 3] = self.x_d if self.base is None else self.base
        att[ATT_START : ATT_START + 3] = self.path_start
        att[ATT_PROGRESS] = self.path_progress
        if self.goal is not None:
            att[ATT_GOAL : ATT_GOAL + 3] = self.goal
            att[ATT_ACTIVE] = 1.0
        if self.overlay is not None:
            att[ATT_HAS_OVERLAY] = 1.0
            att[ATT_RADIUS] = self.overlay.radius
            att[ATT_ANGLE] = self.overlay.angle
        return att

    @classmethod
    def from_array(cls, att: np.ndarray, cmd: AttractorCommand | None = None) -> "AttractorState":
        overlay = None
        if att[ATT_HAS_OVERLAY] > 0.5 and cmd is not None and cmd.overlay is not None:
            overlay = SpiralOverlay(
                cmd.overlay.spiral_velocity,
                cmd.overlay.pitch,
                float(att[ATT_RADIUS]),
                float(att[ATT_ANGLE]),
                att[ATT_GOAL : ATT_GOAL + 2].copy(),
            )
        return cls(
            x_d=att[ATT_XD : ATT_XD + 3].copy(),
            path_start=att[ATT_START : ATT_START + 3].copy(),
            path_progress=float(att[ATT_PROGRESS]),
            base=att[ATT_BASE : ATT_BASE + 3].copy(),
            goal=att[ATT_GOAL : ATT_GOAL + 3].copy() if att[ATT_ACTIVE] > 0.5 else None,
            overlay=overlay,
            orientation=np.eye(3) if cmd is None else cmd.orientation,
        )


def step_attractor(state: AttractorState, cmd: AttractorCommand, dt: float) -> AttractorState:
    """Move ``x_d`` by at most ``v_p * dt`` toward ``cmd.goal`` and apply the overlay.

    A new goal re-plans from the current ``x_d`` with progress reset to 0.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    att = state.as_array()
    attractor_update(att, cmd.as_array(), dt)
    return AttractorState.from_array(att, cmd)
