"""Compiled episode loop.

One call simulates a whole episode: tick the policy, move the attractor,
apply the controller, resolve contact, score the step.  Leaf semantics
mirror :mod:`btms.bt`; the pure-Python runner in :mod:`btms.episode` is the
reference it is tested against.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .rewards import R_BONUS, R_WA, R_WG, R_WH, step_terms
from .sim import W_SURFACE, contact_update, control_update, fk_position, obstacle_distance
from .skills import ATT_ACTIVE, ATT_SIZE, ATT_XD, CMD_HAS_OVERLAY, CMD_SIZE, CMD_VS, attractor_update

SUCCESS, FAILURE, RUNNING = 0, 1, 2

POLICY_TREE = 0
POLICY_NN = 1

# compiled node kinds (see bt.KIND_CODES)
K_SEQ, K_SEL, K_PAR, K_DEC, K_ACT, K_COND = 0, 1, 2, 3, 4, 5

# NN config layout
N_EXTENT = 0
N_CENTER = 1
N_HALF = 4
N_GOAL = 7
N_RADIUS = 10
N_VP = 11
N_SIZE = 12

# log columns
L_T = 0
L_Q = 1
L_EE = 4
L_PEG = 7
L_XD = 10
L_GOAL = 13
L_VP = 16
L_VS = 17
L_RG, L_RA, L_RH = 18, 19, 20
L_STATUS = 21
L_CONTACT = 22
L_CAPTURED = 23
L_PENETRATING = 24
L_SIZE = 25

# summary layout
S_STEPS = 0
S_STATUS = 1
S_FAULT = 2
S_COLLISIONS = 3
S_RG, S_RA, S_RH = 4, 5, 6
S_CAPTURED = 7
S_PEG = 8
S_MIN_OBS = 11
S_SIZE = 12


@njit(cache=True)
def eval_leaf(code, values, ps, peg, xd, contact, cmd):
    if code == 0:
        return SUCCESS
    if code == 1:
        return FAILURE
    if code == 2:
        return SUCCESS if peg[2] > values[ps] else FAILURE
    if code == 3:
        return SUCCESS if peg[2] < values[ps] else FAILURE
    if code == 4:
        return SUCCESS if peg[0] > values[ps] else FAILURE
    if code == 5:
        dx = peg[0] - values[ps]
        dy = peg[1] - values[ps + 1]
        r = values[ps + 3]
        near = math.hypot(dx, dy) < r and peg[2] < values[ps + 2] + r
        return SUCCESS if near else FAILURE
    if code == 6:
        return SUCCESS if contact > 0.0 else FAILURE
    if code == 10:
        cmd[0] = values[ps]
        cmd[1] = values[ps + 1]
        cmd[2] = values[ps + 2]
        cmd[3] = values[ps + 3]
        cmd[CMD_HAS_OVERLAY] = 0.0
        cmd[CMD_VS] = 0.0
        cmd[6] = 0.0
        return RUNNING
    if code == 11:
        cmd[0] = values[ps]
        cmd[1] = values[ps + 1]
        cmd[2] = values[ps + 2]
        cmd[3] = values[ps + 3]
        if values[ps + 4] > 0.0:
            cmd[CMD_HAS_OVERLAY] = 1.0
            cmd[CMD_VS] = values[ps + 4]
            cmd[6] = values[ps + 5]
        else:
            cmd[CMD_HAS_OVERLAY] = 0.0
            cmd[CMD_VS] = 0.0
            cmd[6] = 0.0
        return RUNNING
    if code == 12:
        cmd[0] = xd[0]
        cmd[1] = xd[1]
        cmd[2] = values[ps]
        cmd[3] = values[ps + 1]
        cmd[CMD_HAS_OVERLAY] = 0.0
        cmd[CMD_VS] = 0.0
        cmd[6] = 0.0
        return RUNNING
    if code == 13:
        return SUCCESS
    if code == 14:
        return FAILURE
    return RUNNING


@njit(cache=True)
def tick_tree(kind, beh, cstart, ccount, children, pstart, values, peg, xd, contact, cmd, st_node, st_pos, st_acc):
    """Iterative tick with an explicit stack; returns the root status."""
    st_node[0] = 0
    st_pos[0] = 0
    st_acc[0] = 0
    sp = 1
    last = RUNNING
    while sp > 0:
        i = st_node[sp - 1]
        k = kind[i]
        if k >= K_ACT:
            last = eval_leaf(beh[i], values, pstart[i], peg, xd, contact, cmd)
            sp -= 1
            continue
        pos = st_pos[sp - 1]
        if pos > 0:
            if k == K_SEQ and last != SUCCESS:
                sp -= 1
                continue
            if k == K_SEL and last != FAILURE:
                sp -= 1
                continue
            if k == K_PAR:
                if last == FAILURE:
                    st_acc[sp - 1] |= 1
                elif last == RUNNING:
                    st_acc[sp - 1] |= 2
            if k == K_DEC:
                if beh[i] == 21 and last != RUNNING:
                    last = FAILURE if last == SUCCESS else SUCCESS
                sp -= 1
                continue
        if pos < ccount[i]:
            st_pos[sp - 1] = pos + 1
            st_node[sp] = children[cstart[i] + pos]
            st_pos[sp] = 0
            st_acc[sp] = 0
            sp += 1
        else:
            if k == K_SEQ:
                last = SUCCESS
            elif k == K_SEL:
                last = FAILURE
            else:
                acc = st_acc[sp - 1]
                if acc & 1:
                    last = FAILURE
                elif acc & 2:
                    last = RUNNING
                else:
                    last = SUCCESS
            sp -= 1
    return last


@njit(cache=True)
def nn_forward(w, n_hidden, obs, hidden, out):
    """Two tanh layers; ``w`` packs W1 (hidden x in), b1, W2 (out x hidden), b2."""
    n_in = obs.shape[0]
    n_out = out.shape[0]
    o = n_in * n_hidden
    for h in range(n_hidden):
        s = w[o + h]
        for i in range(n_in):
            s += w[h * n_in + i] * obs[i]
        hidden[h] = math.tanh(s)
    o2 = o + n_hidden
    ob = o2 + n_out * n_hidden
    for k in range(n_out):
        s = w[ob + k]
        for h in range(n_hidden):
            s += w[o2 + k * n_hidden + h] * hidden[h]
        out[k] = math.tanh(s)


@njit(cache=True)
def nn_policy_step(w, n_hidden, cfg, peg, cmd, obs, hidden, y):
    for k in range(3):
        obs[k] = (peg[k] - cfg[N_GOAL + k]) / cfg[N_EXTENT]
    nn_forward(w, n_hidden, obs, hidden, y)
    for k in range(3):
        cmd[k] = cfg[N_CENTER + k] + cfg[N_HALF + k] * y[k]
    cmd[3] = cfg[N_VP]
    cmd[CMD_HAS_OVERLAY] = 0.0
    cmd[CMD_VS] = 0.0
    cmd[6] = 0.0
    r = cfg[N_RADIUS]
    near = math.hypot(peg[0] - cfg[N_GOAL], peg[1] - cfg[N_GOAL + 1]) < r and peg[2] < cfg[N_GOAL + 2] + r
    return SUCCESS if near else RUNNING


@njit(cache=True)
def simulate(
    policy_kind,
    kind,
    beh,
    cstart,
    ccount,
    children,
    pstart,
    values,
    nn_w,
    nn_cfg,
    n_hidden,
    ap,
    wp,
    rp,
    q0,
    T,
    dt,
    log,
    record,
):
    summary = np.zeros(S_SIZE)
    n_nodes = kind.shape[0]
    st_node = np.zeros(n_nodes + 1, np.int64)
    st_pos = np.zeros(n_nodes + 1, np.int64)
    st_acc = np.zeros(n_nodes + 1, np.int64)
    obs = np.zeros(3)
    hidden = np.zeros(max(n_hidden, 1))
    y = np.zeros(3)

    J = np.zeros((6, 3))
    pos = np.zeros(3)
    R = np.zeros((3, 3))
    Rerr = np.zeros((3, 3))
    Rd = np.eye(3)
    err = np.zeros(6)
    q = q0.copy()
    qd = np.zeros(3)
    qn = np.zeros(3)
    qdn = np.zeros(3)
    ee = np.zeros(3)
    peg = np.zeros(3)
    peg_new = np.zeros(3)
    terms = np.zeros(3)

    fk_position(ap, q, ee)
    for k in range(3):
        peg[k] = ee[k]
    in_contact = False
    captured = False
    ever_captured = False
    surface = wp[W_SURFACE]

    att = np.zeros(ATT_SIZE)
    for k in range(3):
        att[ATT_XD + k] = ee[k]
    att[ATT_ACTIVE] = 0.0
    cmd = np.zeros(CMD_SIZE)
    for k in range(3):
        cmd[k] = ee[k]
    cmd[3] = 1.0

    status = RUNNING
    fault = False
    collisions = 0
    sum_g = 0.0
    sum_a = 0.0
    sum_h = 0.0
    min_obs = math.inf
    t = 0.0
    steps = 0
    for j in range(T):
        contact = (surface - ee[2]) if in_contact else 0.0
        if policy_kind == POLICY_TREE:
            status = tick_tree(
                kind, beh, cstart, ccount, children, pstart, values,
                peg, att[ATT_XD:ATT_XD + 3], contact, cmd, st_node, st_pos, st_acc,
            )
        else:
            status = nn_policy_step(nn_w, n_hidden, nn_cfg, peg, cmd, obs, hidden, y)
        if status != RUNNING:
            break

        attractor_update(att, cmd, dt)
        ok = control_update(ap, q, qd, att[ATT_XD:ATT_XD + 3], Rd, dt, J, pos, R, Rerr, err, qn, qdn)
        if not ok:
            fault = True
            status = FAILURE
            break
        for k in range(3):
            q[k] = qn[k]
            qd[k] = qdn[k]
        fk_position(ap, q, ee)
        v_s = cmd[CMD_VS] if cmd[CMD_HAS_OVERLAY] > 0.5 else 0.0
        in_contact, captured = contact_update(
            wp, ee, att[ATT_XD + 2], v_s, peg, in_contact, captured, peg_new
        )
        if captured:
            ever_captured = True
        for k in range(3):
            peg[k] = peg_new[k]
        t += dt
        steps += 1

        step_terms(rp, wp, peg, terms)
        sum_g += terms[0]
        sum_a += terms[1]
        sum_h += terms[2]
        d_obs = obstacle_distance(wp, peg)
        penetrating = d_obs <= 0.0
        if penetrating:
            collisions += 1
        if d_obs < min_obs:
            min_obs = d_obs

        if record:
            row = log[j]
            row[L_T] = t
            for k in range(3):
                row[L_Q + k] = q[k]
                row[L_EE + k] = ee[k]
                row[L_PEG + k] = peg[k]
                row[L_XD + k] = att[ATT_XD + k]
                row[L_GOAL + k] = cmd[k]
            row[L_VP] = cmd[3]
            row[L_VS] = v_s
            row[L_RG] = terms[0]
            row[L_RA] = terms[1]
            row[L_RH] = terms[2]
            row[L_STATUS] = status
            row[L_CONTACT] = 1.0 if in_contact else 0.0
            row[L_CAPTURED] = 1.0 if captured else 0.0
            row[L_PENETRATING] = 1.0 if penetrating else 0.0

    summary[S_STEPS] = steps
    summary[S_STATUS] = status
    summary[S_FAULT] = 1.0 if fault else 0.0
    summary[S_COLLISIONS] = collisions
    summary[S_RG] = sum_g
    summary[S_RA] = sum_a
    summary[S_RH] = sum_h
    summary[S_CAPTURED] = 1.0 if ever_captured else 0.0
    for k in range(3):
        summary[S_PEG + k] = peg[k]
    summary[S_MIN_OBS] = min_obs
    return summary


def shaped_return(summary: np.ndarray, rp: np.ndarray) -> float:
    """Weighted shaped sum plus finish bonus, from a kernel summary."""
    total = rp[R_WG] * summary[S_RG] + rp[R_WA] * summary[S_RA] + rp[R_WH] * summary[S_RH]
    if summary[S_STATUS] == SUCCESS:
        total += rp[R_BONUS]
    return float(total)
