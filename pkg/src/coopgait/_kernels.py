"""Compiled rigid-body kernels.

All spatial quantities are world-frame Plücker vectors referred to the world
origin: motion vectors are (angular, linear-at-origin), force vectors are
(moment-about-origin, force).  Bodies are stored in topological order with one
primitive joint per body (revolute, prismatic or fixed).
"""

import numpy as np
from numba import njit

REVOLUTE = 0
PRISMATIC = 1
FIXED = 2


@njit(cache=True)
def _rot(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * t
    R[0, 1] = x * y * t - z * s
    R[0, 2] = x * z * t + y * s
    R[1, 0] = y * x * t + z * s
    R[1, 1] = c + y * y * t
    R[1, 2] = y * z * t - x * s
    R[2, 0] = z * x * t - y * s
    R[2, 1] = z * y * t + x * s
    R[2, 2] = c + z * z * t
    return R


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _crm(V, M):
    # motion cross product V x M
    out = np.empty(6)
    w = V[:3]
    u = V[3:]
    out[:3] = _cross(w, M[:3])
    out[3:] = _cross(w, M[3:]) + _cross(u, M[:3])
    return out


@njit(cache=True)
def _crf(V, F):
    # force cross product V x* F
    out = np.empty(6)
    w = V[:3]
    u = V[3:]
    out[:3] = _cross(w, F[:3]) + _cross(u, F[3:])
    out[3:] = _cross(w, F[3:])
    return out


@njit(cache=True)
def _skew(c):
    S = np.zeros((3, 3))
    S[0, 1] = -c[2]
    S[0, 2] = c[1]
    S[1, 0] = c[2]
    S[1, 2] = -c[0]
    S[2, 0] = -c[1]
    S[2, 1] = c[0]
    return S


@njit(cache=True)
def forward_kinematics(q, parent, jtype, axis, origin, dof):
    nb = parent.shape[0]
    R = np.empty((nb, 3, 3))
    p = np.empty((nb, 3))
    S = np.zeros((nb, 6))
    for k in range(nb):
        if parent[k] < 0:
            Rp = np.eye(3)
            pp = np.zeros(3)
        else:
            Rp = R[parent[k]]
            pp = p[parent[k]]
        a_w = Rp @ axis[k]
        jt = jtype[k]
        if jt == REVOLUTE:
            R[k] = Rp @ _rot(axis[k], q[dof[k]])
            p[k] = pp + Rp @ origin[k]
            S[k, :3] = a_w
            S[k, 3:] = _cross(p[k], a_w)
        elif jt == PRISMATIC:
            R[k] = Rp
            p[k] = pp + Rp @ (origin[k] + axis[k] * q[dof[k]])
            S[k, 3:] = a_w
        else:
            R[k] = Rp
            p[k] = pp + Rp @ origin[k]
    return R, p, S


@njit(cache=True)
def _spatial_inertia(Rk, pk, mass, com, inertia):
    c = pk + Rk @ com
    Ic = Rk @ inertia @ Rk.T
    C = _skew(c)
    I6 = np.zeros((6, 6))
    I6[:3, :3] = Ic - mass * (C @ C)
    I6[:3, 3:] = mass * C
    I6[3:, :3] = -mass * C
    for i in range(3):
        I6[3 + i, 3 + i] = mass
    return I6


@njit(cache=True)
def dynamics_terms(q, v, parent, jtype, axis, origin, dof, mass, com, inertia,
                   gravity, pt_body, pt_off, need_dyn):
    """Mass matrix, bias vector and point kinematics in one tree sweep.

    Returns (D, H, P, J, Jd) where P[i], J[i], Jd[i] are the world position,
    3 x n Jacobian and Jdot*v of point i.  D and H are zero-filled when
    ``need_dyn`` is False.
    """
    nb = parent.shape[0]
    n = q.shape[0]
    R, p, S = forward_kinematics(q, parent, jtype, axis, origin, dof)

    V = np.zeros((nb, 6))
    A = np.zeros((nb, 6))
    A0 = np.zeros(6)
    A0[3:] = -gravity
    for k in range(nb):
        if parent[k] < 0:
            Vp = np.zeros(6)
            Ap = A0.copy()
        else:
            Vp = V[parent[k]]
            Ap = A[parent[k]]
        if jtype[k] == FIXED:
            V[k] = Vp
            A[k] = Ap
        else:
            qd = v[dof[k]]
            V[k] = Vp + S[k] * qd
            A[k] = Ap + _crm(Vp, S[k]) * qd

    D = np.zeros((n, n))
    H = np.zeros(n)
    if need_dyn:
        Ic = np.zeros((nb, 6, 6))
        F = np.zeros((nb, 6))
        for k in range(nb):
            I6 = _spatial_inertia(R[k], p[k], mass[k], com[k], inertia[k])
            Ic[k] = I6
            F[k] = I6 @ A[k] + _crf(V[k], I6 @ V[k])
        for k in range(nb - 1, -1, -1):
            if jtype[k] != FIXED:
                H[dof[k]] = S[k] @ F[k]
                Fk = Ic[k] @ S[k]
                D[dof[k], dof[k]] = S[k] @ Fk
                j = parent[k]
                while j >= 0:
                    if jtype[j] != FIXED:
                        val = S[j] @ Fk
                        D[dof[j], dof[k]] = val
                        D[dof[k], dof[j]] = val
                    j = parent[j]
            if parent[k] >= 0:
                F[parent[k]] += F[k]
                Ic[parent[k]] += Ic[k]

    npnt = pt_body.shape[0]
    P = np.zeros((npnt, 3))
    J = np.zeros((npnt, 3, n))
    Jd = np.zeros((npnt, 3))
    for i in range(npnt):
        b = pt_body[i]
        if b < 0:
            P[i] = pt_off[i]
            continue
        pos = p[b] + R[b] @ pt_off[i]
        P[i] = pos
        k = b
        while k >= 0:
            if jtype[k] != FIXED:
                J[i, :, dof[k]] = S[k, 3:] + _cross(S[k, :3], pos)
            k = parent[k]
        w = V[b, :3]
        vp = V[b, 3:] + _cross(w, pos)
        acc = A[b] - A0
        Jd[i] = acc[3:] + _cross(acc[:3], pos) + _cross(w, vp)
    return D, H, P, J, Jd
