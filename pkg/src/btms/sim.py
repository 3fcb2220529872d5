"""Kinematic arm simulator with Jacobian-transpose Cartesian control.

The arm is a spatial chain: a yaw joint at the base, a shoulder pitch joint
at the base, an elbow pitch joint, and three links where the last one is a
rigid hand collinear with the forearm.  A world-fixed tool offset carries the
peg (the wrist is assumed to keep the peg vertical).

Contact is analytic: a horizontal surface with one cylindrical hole, and a
box obstacle that is only measured (never blocks motion).

All hot-path functions are numba-compiled and operate on flat parameter
arrays built by :meth:`ArmModel.as_array` / :meth:`WorldModel.as_array`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

# arm parameter layout
A_L1, A_L2, A_L3 = 0, 1, 2
A_BASE = 3
A_TOOL = 6
A_VMAX = 9
A_K = 10
A_D = 16
A_QMIN = 22
A_QMAX = 25
A_SIZE = 28

# world parameter layout
W_HAS_BOX = 0
W_BOX_C = 1
W_BOX_H = 4
W_SURFACE = 7
W_HOLE_X = 8
W_HOLE_Y = 9
W_HOLE_R = 10
W_HOLE_DEPTH = 11
W_PEG_R = 12
W_KAPPA0 = 13
W_KAPPA1 = 14
W_STICK = 15
W_SIZE = 16

HOLE_REGION_HALF_SIDE = 0.001  # 2 mm square target region
HOLE_REGION_TOP_GAP = 0.001  # region stops 1 mm below the surface


class SimulationFault(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


@njit(cache=True)
def fk_position(ap, q, out):
    lf = ap[A_L2] + ap[A_L3]
    a12 = q[1] + q[2]
    r = ap[A_L1] * math.cos(q[1]) + lf * math.cos(a12)
    z = ap[A_L1] * math.sin(q[1]) + lf * math.sin(a12)
    out[0] = ap[A_BASE] + r * math.cos(q[0]) + ap[A_TOOL]
    out[1] = ap[A_BASE + 1] + r * math.sin(q[0]) + ap[A_TOOL + 1]
    out[2] = ap[A_BASE + 2] + z + ap[A_TOOL + 2]


@njit(cache=True)
def fk_rotation(q, out):
    c0, s0 = math.cos(q[0]), math.sin(q[0])
    phi = q[1] + q[2]
    cp, sp = math.cos(phi), math.sin(phi)
    # Rz(q0) @ Ry(-phi)
    out[0, 0] = c0 * cp
    out[0, 1] = -s0
    out[0, 2] = -c0 * sp
    out[1, 0] = s0 * cp
    out[1, 1] = c0
    out[1, 2] = -s0 * sp
    out[2, 0] = sp
    out[2, 1] = 0.0
    out[2, 2] = cp


@njit(cache=True)
def jacobian_into(ap, q, J):
    lf = ap[A_L2] + ap[A_L3]
    c0, s0 = math.cos(q[0]), math.sin(q[0])
    a12 = q[1] + q[2]
    s1, c1 = math.sin(q[1]), math.cos(q[1])
    s12, c12 = math.sin(a12), math.cos(a12)
    r = ap[A_L1] * c1 + lf * c12
    dr1 = -ap[A_L1] * s1 - lf * s12
    dz1 = ap[A_L1] * c1 + lf * c12
    dr2 = -lf * s12
    dz2 = lf * c12
    J[0, 0] = -r * s0
    J[1, 0] = r * c0
    J[2, 0] = 0.0
    J[0, 1] = dr1 * c0
    J[1, 1] = dr1 * s0
    J[2, 1] = dz1
    J[0, 2] = dr2 * c0
    J[1, 2] = dr2 * s0
    J[2, 2] = dz2
    # angular part: yaw about z, both pitch joints about (sin q0, -cos q0, 0)
    J[3, 0] = 0.0
    J[4, 0] = 0.0
    J[5, 0] = 1.0
    for j in (1, 2):
        J[3, j] = s0
        J[4, j] = -c0
        J[5, j] = 0.0


@njit(cache=True)
def rotation_log(R, out):
    """Axis-angle vector of rotation matrix ``R`` (safe near 0 and pi)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = min(1.0, max(-1.0, 0.5 * (tr - 1.0)))
    angle = math.acos(c)
    vx = R[2, 1] - R[1, 2]
    vy = R[0, 2] - R[2, 0]
    vz = R[1, 0] - R[0, 1]
    if angle < 1e-7:
        out[0] = 0.5 * vx
        out[1] = 0.5 * vy
        out[2] = 0.5 * vz
    elif math.pi - angle < 1e-6:
        ax = math.sqrt(max(0.0, 0.5 * (R[0, 0] + 1.0)))
        ay = math.sqrt(max(0.0, 0.5 * (R[1, 1] + 1.0)))
        az = math.sqrt(max(0.0, 0.5 * (R[2, 2] + 1.0)))
        if ax >= ay and ax >= az:
            ay = math.copysign(ay, R[0, 1] + R[1, 0])
            az = math.copysign(az, R[0, 2] + R[2, 0])
        elif ay >= az:
            ax = math.copysign(ax, R[0, 1] + R[1, 0])
            az = math.copysign(az, R[1, 2] + R[2, 1])
        else:
            ax = math.copysign(ax, R[0, 2] + R[2, 0])
            ay = math.copysign(ay, R[1, 2] + R[2, 1])
        out[0] = angle * ax
        out[1] = angle * ay
        out[2] = angle * az
    else:
        k = angle / (2.0 * math.sin(angle))
        out[0] = k * vx
        out[1] = k * vy
        out[2] = k * vz


@njit(cache=True)
def control_update(ap, q, qd, xd, Rd, dt, J, pos, R, Rerr, err, out_q, out_qd):
    """One step of ``qdot_c = J^T (K x_err - D J qdot)`` followed by integration.

    Work arrays ``J`` (6x3), ``pos`` (3), ``R``/``Rerr`` (3x3), ``err`` (6)
    are caller-owned.  Returns False if the command is not finite.
    """
    jacobian_into(ap, q, J)
    fk_position(ap, q, pos)
    for k in range(3):
        err[k] = xd[k] - pos[k]
    rot_active = ap[A_K + 3] > 0.0 or ap[A_K + 4] > 0.0 or ap[A_K + 5] > 0.0
    if rot_active:
        fk_rotation(q, R)
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += Rd[a, c] * R[b, c]
                Rerr[a, b] = s
        rotation_log(Rerr, err[3:])
    else:
        err[3] = 0.0
        err[4] = 0.0
        err[5] = 0.0
    n_rows = 6 if rot_active else 3
    # err becomes the Cartesian "force" K x_err - D J qdot
    for i in range(n_rows):
        v = J[i, 0] * qd[0] + J[i, 1] * qd[1] + J[i, 2] * qd[2]
        err[i] = ap[A_K + i] * err[i] - ap[A_D + i] * v
    ok = True
    vmax = ap[A_VMAX]
    for j in range(3):
        s = 0.0
        for i in range(n_rows):
            s += J[i, j] * err[i]
        if not math.isfinite(s):
            ok = False
        if s > vmax:
            s = vmax
        elif s < -vmax:
            s = -vmax
        qn = q[j] + s * dt
        lo = ap[A_QMIN + j]
        hi = ap[A_QMAX + j]
        if qn < lo:
            qn = lo
            s = (qn - q[j]) / dt
        elif qn > hi:
            qn = hi
            s = (qn - q[j]) / dt
        out_q[j] = qn
        out_qd[j] = s
    return ok


# ---------------------------------------------------------------------------
# contact and distances
# ---------------------------------------------------------------------------


@njit(cache=True)
def capture_threshold(wp, v_s):
    return wp[W_KAPPA0] + wp[W_KAPPA1] * v_s


@njit(cache=True)
def contact_update(wp, raw, xd_z, v_s, prev_peg, prev_contact, prev_captured, out):
    """Resolve the peg tip against the surface and hole.

    ``raw`` is the unconstrained tip (end effector + tool offset) and
    ``surface - xd_z`` the commanded penetration used as pressure proxy.
    Writes the resolved tip to ``out`` and returns ``(in_contact, captured)``.
    """
    surface = wp[W_SURFACE]
    hx = wp[W_HOLE_X]
    hy = wp[W_HOLE_Y]
    band = wp[W_HOLE_R] - wp[W_PEG_R]
    bottom = surface - wp[W_HOLE_DEPTH]
    pressure = surface - xd_z

    captured = prev_captured and raw[2] < surface
    if captured:
        rx = raw[0] - hx
        ry = raw[1] - hy
        n = math.sqrt(rx * rx + ry * ry)
        if n > band:
            rx *= band / n
            ry *= band / n
        out[0] = hx + rx
        out[1] = hy + ry
        out[2] = max(raw[2], bottom)
        return False, True
    if raw[2] >= surface:
        out[0] = raw[0]
        out[1] = raw[1]
        out[2] = raw[2]
        return False, False
    if prev_contact and pressure > wp[W_STICK]:
        # friction lock: too much pressure, the tip cannot slide
        px = prev_peg[0]
        py = prev_peg[1]
    else:
        px = raw[0]
        py = raw[1]
    dx = px - hx
    dy = py - hy
    if math.sqrt(dx * dx + dy * dy) <= band and pressure >= capture_threshold(wp, v_s):
        out[0] = px
        out[1] = py
        out[2] = max(raw[2], bottom)
        return False, True
    out[0] = px
    out[1] = py
    out[2] = surface
    return True, False


@njit(cache=True)
def box_distance(p, cx, cy, cz, hx, hy, hz):
    dx = max(abs(p[0] - cx) - hx, 0.0)
    dy = max(abs(p[1] - cy) - hy, 0.0)
    dz = max(abs(p[2] - cz) - hz, 0.0)
    return math.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True)
def obstacle_distance(wp, p):
    if wp[W_HAS_BOX] < 0.5:
        return math.inf
    return box_distance(
        p, wp[W_BOX_C], wp[W_BOX_C + 1], wp[W_BOX_C + 2], wp[W_BOX_H], wp[W_BOX_H + 1], wp[W_BOX_H + 2]
    )


@njit(cache=True)
def hole_region_distance(wp, p):
    top = wp[W_SURFACE] - HOLE_REGION_TOP_GAP
    bottom = wp[W_SURFACE] - wp[W_HOLE_DEPTH]
    return box_distance(
        p,
        wp[W_HOLE_X],
        wp[W_HOLE_Y],
        0.5 * (top + bottom),
        HOLE_REGION_HALF_SIDE,
        HOLE_REGION_HALF_SIDE,
        0.5 * (top - bottom),
    )


# ---------------------------------------------------------------------------
# dataclass API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmModel:
    link_lengths: tuple[float, float, float] = (0.4, 0.4, 0.2)
    base: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tool_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    joint_lower: tuple[float, float, float] = (-math.pi, -1.2, -2.9)
    joint_upper: tuple[float, float, float] = (math.pi, 2.4, 0.0)
    joint_velocity_limit: float = 2.0
    stiffness: tuple[float, ...] = (60.0, 60.0, 60.0, 0.0, 0.0, 0.0)
    damping: tuple[float, ...] = (0.3, 0.3, 0.3, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.link_lengths) != 3 or min(self.link_lengths) <= 0:
            raise ValueError("three positive link lengths required")
        if len(self.stiffness) != 6 or len(self.damping) != 6:
            raise ValueError("stiffness and damping are 6-element diagonals")
        if min(self.stiffness) < 0 or min(self.damping) < 0:
            raise ValueError("stiffness and damping must be non-negative")

    def as_array(self) -> np.ndarray:
        ap = np.zeros(A_SIZE)
        ap[A_L1 : A_L3 + 1] = self.link_lengths
        ap[A_BASE : A_BASE + 3] = self.base
        ap[A_TOOL : A_TOOL + 3] = self.tool_offset
        ap[A_VMAX] = self.joint_velocity_limit
        ap[A_K : A_K + 6] = self.stiffness
        ap[A_D : A_D + 6] = self.damping
        ap[A_QMIN : A_QMIN + 3] = self.joint_lower
        ap[A_QMAX : A_QMAX + 3] = self.joint_upper
        return ap


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class WorldModel:
    """Workstation geometry.  ``hole_center`` is nominal; the true hole sits at
    ``hole_center + hole_displacement``."""

    obstacle: Box | None = None
    surface_height: float = 0.05
    hole_center: tuple[float, float] = (0.22, 0.5)
    hole_radius: float = 0.0075
    hole_depth: float = 0.04
    peg_radius: float = 0.005
    hole_displacement: tuple[float, float] = (0.0, 0.0)
    kappa0: float = 0.001
    kappa1: float = 0.5
    stick_depth: float = 0.012

    def __post_init__(self):
        if not self.peg_radius < self.hole_radius:
            raise ValueError("peg must be narrower than the hole")

    @property
    def hole_position(self) -> np.ndarray:
        return np.asarray(self.hole_center) + np.asarray(self.hole_displacement)

    def displaced(self, dx: float, dy: float) -> "WorldModel":
        return replace(self, hole_displacement=(float(dx), float(dy)))

    def as_array(self) -> np.ndarray:
        wp = np.zeros(W_SIZE)
        if self.obstacle is not None:
            wp[W_HAS_BOX] = 1.0
            wp[W_BOX_C : W_BOX_C + 3] = self.obstacle.center
            wp[W_BOX_H : W_BOX_H + 3] = self.obstacle.half_extents
        wp[W_SURFACE] = self.surface_height
        wp[W_HOLE_X : W_HOLE_Y + 1] = self.hole_position
        wp[W_HOLE_R] = self.hole_radius
        wp[W_HOLE_DEPTH] = self.hole_depth
        wp[W_PEG_R] = self.peg_radius
        wp[W_KAPPA0] = self.kappa0
        wp[W_KAPPA1] = self.kappa1
        wp[W_STICK] = self.stick_depth
        return wp


@dataclass(frozen=True)
class ArmState:
    q: np.ndarray
    q_dot: np.ndarray
    x_ee: np.ndarray
    peg_tip: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    in_contact: bool = False
    peg_captured: bool = False
    t: float = 0.0


def forward_kinematics(model: ArmModel, q) -> Pose:
    q = np.asarray(q, float)
    pos = np.empty(3)
    fk_position(model.as_array(), q, pos)
    R = np.empty((3, 3))
    fk_rotation(q, R)
    return Pose(pos, R)


def jacobian(model: ArmModel, q) -> np.ndarray:
    J = np.empty((6, 3))
    jacobian_into(model.as_array(), np.asarray(q, float), J)
    return J


def inverse_kinematics(model: ArmModel, position) -> np.ndarray:
    """Elbow-up joint solution placing the tool tip at ``position``."""
    p = np.asarray(position, float) - np.asarray(model.base) - np.asarray(model.tool_offset)
    l1 = model.link_lengths[0]
    lf = model.link_lengths[1] + model.link_lengths[2]
    q0 = math.atan2(p[1], p[0])
    r = math.hypot(p[0], p[1])
    z = p[2]
    d2 = r * r + z * z
    cos_q2 = (d2 - l1 * l1 - lf * lf) / (2 * l1 * lf)
    if not -1.0 <= cos_q2 <= 1.0:
        raise ValueError(f"position {position!r} is out of reach")
    q2 = -math.acos(cos_q2)
    q1 = math.atan2(z, r) + math.atan2(lf * math.sin(-q2), l1 + lf * math.cos(q2))
    return np.array([q0, q1, q2])


def initial_state(model: ArmModel, q) -> ArmState:
    q = np.asarray(q, float).copy()
    pose = forward_kinematics(model, q)
    return ArmState(q=q, q_dot=np.zeros(3), x_ee=pose.position, peg_tip=pose.position.copy(), rotation=pose.rotation)


def control_step(model: ArmModel, state: ArmState, x_d, dt: float, orientation=None) -> ArmState:
    """Apply the Cartesian attractor law for one step and integrate joint velocities.

    Damping enters with a negative sign so it opposes end-effector motion.
    Raises :class:`SimulationFault` on a non-finite command.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ap = model.as_array()
    Rd = np.eye(3) if orientation is None else np.asarray(orientation, float)
    q = np.empty(3)
    qd = np.empty(3)
    ok = control_update(
        ap,
        np.asarray(state.q, float),
        np.asarray(state.q_dot, float),
        np.asarray(x_d, float)[:3],
        Rd,
        dt,
        np.empty((6, 3)),
        np.empty(3),
        np.empty((3, 3)),
        np.empty((3, 3)),
        np.empty(6),
        q,
        qd,
    )
    if not ok or not np.all(np.isfinite(q)):
        raise SimulationFault("non-finite joint command")
    pose = forward_kinematics(model, q)
    return replace(state, q=q, q_dot=qd, x_ee=pose.position, rotation=pose.rotation, t=state.t + dt)


def contact_step(world: WorldModel, state: ArmState, x_d, v_s: float = 0.0) -> ArmState:
    """Resolve the peg tip after a control step (``x_d`` gives the pressure proxy)."""
    raw = np.asarray(state.x_ee, float)
    out = np.empty(3)
    in_contact, captured = contact_update(
        world.as_array(),
        raw,
        float(np.asarray(x_d)[2]),
        float(v_s),
        np.asarray(state.peg_tip, float),
        state.in_contact,
        state.peg_captured,
        out,
    )
    return replace(state, peg_tip=out, in_contact=bool(in_contact), peg_captured=bool(captured))


def distance_to(world: WorldModel, point) -> tuple[float, float]:
    """Distances from ``point`` to the obstacle box and to the hole target region."""
    wp = world.as_array()
    p = np.asarray(point, float)
    return float(obstacle_distance(wp, p)), float(hole_region_distance(wp, p))
