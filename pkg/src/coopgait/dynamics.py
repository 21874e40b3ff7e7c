"""Manipulator terms, contact-constrained dynamics and rigid impacts.

Sign convention: ``D q'' + H = B u + J^T lam``.  The constrained solves use a
dense KKT factorization ``[D, -J^T; J, 0]``.  The two-agent variants add the
bar constraint ``|p1 - p2|^2 = L^2`` with bar forces ``J_i^T (p_i - p_j) lam_e``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .model import AgentState, AugmentedState, Kinematics, RobotModel

RANK_TOL = 1e-8


class SingularKKTError(np.linalg.LinAlgError):
    pass


class DegenerateBarError(ValueError):
    pass


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    return model.evaluate(q, np.zeros(model.n)).D


def bias_vector(model: RobotModel, q, v) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms H(q, v)."""
    return model.evaluate(q, v).H


def kinetic_energy(model: RobotModel, q, v) -> float:
    v = np.asarray(v, dtype=float)
    return 0.5 * float(v @ mass_matrix(model, q) @ v)


def potential_energy(model: RobotModel, q) -> float:
    """Gravitational potential -sum m_k g.c_k, computed from body COM points."""
    from . import _kernels as K
    R, p, _ = K.forward_kinematics(np.asarray(q, dtype=float), model._parent, model._jtype,
                                   model._axis, model._origin, model._dof)
    com = p + np.einsum("kij,kj->ki", R, model._com)
    return float(-np.sum(model._mass * (com @ model.gravity)))


@dataclass(frozen=True)
class ContactSet:
    """Ordered active contact points of one domain."""

    ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))

    def rows(self, model: RobotModel) -> int:
        return model.contact_dim * len(self.ids)

    def stack(self, model: RobotModel, kin: Kinematics) -> tuple[np.ndarray, np.ndarray]:
        """Stacked contact Jacobian and J-dot-v (2 rows per point planar, 3 spatial)."""
        r = model.contact_dim
        if not self.ids:
            return np.zeros((0, model.n)), np.zeros(0)
        J = np.vstack([kin.jac(c)[:r] for c in self.ids])
        Jd = np.concatenate([kin.jdv(c)[:r] for c in self.ids])
        return J, Jd

    def positions(self, model: RobotModel, kin: Kinematics) -> np.ndarray:
        r = model.contact_dim
        if not self.ids:
            return np.zeros(0)
        return np.concatenate([kin.pos(c)[:r] for c in self.ids])


@dataclass(frozen=True)
class BarConstraint:
    """Massless rigid bar between the two end effectors.

    ``offset2`` is added to agent 2's end-effector position; planar agents use it
    to place agent 2 in a parallel plane (lateral separation).
    """

    length: float = 1.0
    offset2: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("bar length must be positive")
        object.__setattr__(self, "offset2", tuple(float(c) for c in self.offset2))

    def residual(self, p1, p2) -> float:
        """Position-level residual |p1 - p2| - L."""
        return float(np.linalg.norm(p1 - (p2 + np.asarray(self.offset2))) - self.length)


@dataclass(frozen=True)
class Baumgarte:
    """Constraint stabilization q'' terms 2*zeta*omega*phidot + omega^2*phi."""

    omega: float = 50.0
    zeta: float = 1.0


def _check_rank(J: np.ndarray, label) -> None:
    if J.shape[0] == 0:
        return
    if J.shape[0] > J.shape[1]:
        raise SingularKKTError(f"singular KKT: more constraints than coordinates for {label}")
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] < RANK_TOL:
        raise SingularKKTError(f"singular KKT: rank-deficient constraints {label} "
                               f"(min singular value {sv[-1]:.3e})")


def _kkt_solve(D: np.ndarray, J: np.ndarray, rhs_top: np.ndarray, rhs_bot: np.ndarray, label):
    """Solve [D, -J^T; J, 0][a; lam] = [top; bot] (multiple RHS allowed)."""
    n = D.shape[0]
    k = J.shape[0]
    if k == 0:
        try:
            c = sla.cho_factor(D)
        except np.linalg.LinAlgError as exc:
            raise SingularKKTError(f"mass matrix not positive definite: {exc}") from exc
        return sla.cho_solve(c, rhs_top), np.zeros((0,) + rhs_top.shape[1:])
    _check_rank(J, label)
    M = np.zeros((n + k, n + k))
    M[:n, :n] = D
    M[:n, n:] = -J.T
    M[n:, :n] = J
    sol = np.linalg.solve(M, np.concatenate([rhs_top, rhs_bot]))
    return sol[:n], sol[n:]


def _agent(x) -> AgentState:
    return x if isinstance(x, AgentState) else AgentState.from_vector(x)


def constrained_fd(model: RobotModel, domain: ContactSet, x, u,
                   baumgarte: Baumgarte | None = None, anchors=None):
    """Contact-constrained forward dynamics; returns (q'', lam_c)."""
    x = _agent(x)
    kin = model.evaluate(x.q, x.v)
    J, Jd = domain.stack(model, kin)
    rhs = model.B @ np.asarray(u, dtype=float) - kin.H
    bot = -Jd
    if baumgarte is not None and J.shape[0]:
        w, z = baumgarte.omega, baumgarte.zeta
        bot = bot - 2 * z * w * (J @ x.v)
        if anchors is not None:
            bot = bot - w * w * (domain.positions(model, kin) - np.asarray(anchors))
    return _kkt_solve(kin.D, J, rhs, bot, domain.ids)


def affine_decomposition(model: RobotModel, domain: ContactSet, x, kin: Kinematics | None = None):
    """(f_acc, g_acc, f_lam, g_lam) with q'' = f_acc + g_acc u and lam = f_lam + g_lam u."""
    x = _agent(x)
    if kin is None:
        kin = model.evaluate(x.q, x.v)
    J, Jd = domain.stack(model, kin)
    top = np.column_stack([-kin.H, model.B])
    bot = np.zeros((J.shape[0], 1 + model.m))
    bot[:, 0] = -Jd
    a, lam = _kkt_solve(kin.D, J, top, bot, domain.ids)
    return a[:, 0], a[:, 1:], lam[:, 0], lam[:, 1:]


def impact_map(model: RobotModel, new_domain: ContactSet, x):
    """Plastic impact: D(v+ - v-) = J^T dlam, J v+ = 0.  Returns (v+, dlam)."""
    x = _agent(x)
    kin = model.evaluate(x.q, x.v)
    J, _ = new_domain.stack(model, kin)
    return _kkt_solve(kin.D, J, kin.D @ x.v, np.zeros(J.shape[0]), new_domain.ids)


def contact_force_flags(model: RobotModel, domain: ContactSet, lam, mu: float = 0.6) -> list[str]:
    """Monitor only: flags negative normal force or friction-cone violation."""
    r = model.contact_dim
    flags = []
    lam = np.asarray(lam, dtype=float)
    for i, c in enumerate(domain.ids):
        f = lam[r * i:r * (i + 1)]
        normal = f[-1]
        tangent = np.linalg.norm(f[:-1])
        if normal < 0:
            flags.append(f"{c}:negative-normal")
        elif tangent > mu * normal + 1e-12:
            flags.append(f"{c}:friction")
    return flags


# ------------------------------------------------------------- two agents

def _bar_geometry(kin1: Kinematics, kin2: Kinematics, v1, v2, bar: BarConstraint):
    p1 = kin1.pos("end_effector")
    p2 = kin2.pos("end_effector") + np.asarray(bar.offset2)
    dp = p1 - p2
    if np.linalg.norm(dp) < 1e-9:
        raise DegenerateBarError("degenerate bar: end effectors coincide")
    J1 = kin1.jac("end_effector")
    J2 = kin2.jac("end_effector")
    dv = J1 @ v1 - J2 @ v2
    da = kin1.jdv("end_effector") - kin2.jdv("end_effector")
    return dp, J1, J2, dv, da


def _coupled_matrix(m1, m2, kin1, kin2, Jc1, Jc2, dp, Je1, Je2):
    n1, n2 = m1.n, m2.n
    k1, k2 = Jc1.shape[0], Jc2.shape[0]
    N = n1 + n2 + k1 + k2 + 1
    M = np.zeros((N, N))
    M[:n1, :n1] = kin1.D
    M[n1:n1 + n2, n1:n1 + n2] = kin2.D
    o = n1 + n2
    g1 = Je1.T @ dp
    g2 = -(Je2.T @ dp)
    M[:n1, o:o + k1] = -Jc1.T
    M[n1:n1 + n2, o + k1:o + k1 + k2] = -Jc2.T
    M[:n1, -1] = -g1
    M[n1:n1 + n2, -1] = -g2
    M[o:o + k1, :n1] = Jc1
    M[o + k1:o + k1 + k2, n1:n1 + n2] = Jc2
    M[-1, :n1] = g1
    M[-1, n1:n1 + n2] = g2
    return M


def _coupled_solve(M, rhs, label):
    try:
        lu = sla.lu_factor(M, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularKKTError(f"singular coupled KKT for {label}: {exc}") from exc
    diag = np.abs(np.diag(lu[0]))
    if diag.min() < 1e-12 * max(1.0, diag.max()):
        raise SingularKKTError(f"singular coupled KKT for {label}")
    return sla.lu_solve(lu, rhs)


def _split(sol, n1, n2, k1, k2):
    o = n1 + n2
    return (sol[:n1], sol[n1:o], sol[o:o + k1], sol[o + k1:o + k1 + k2], sol[-1])


def coupled_terms(m1, m2, domains, xa: AugmentedState, bar: BarConstraint, kin=None):
    """Assemble the coupled KKT matrix and the u-independent right-hand side.

    Returns (M, rhs0, B1_rows, B2_rows) where the full right-hand side is
    ``rhs0 + B1_rows u1 + B2_rows u2``.
    """
    c1, c2 = domains
    x1, x2 = xa.agent1, xa.agent2
    kin1, kin2 = kin if kin is not None else (m1.evaluate(x1.q, x1.v), m2.evaluate(x2.q, x2.v))
    Jc1, Jd1 = c1.stack(m1, kin1)
    Jc2, Jd2 = c2.stack(m2, kin2)
    _check_rank(Jc1, c1.ids)
    _check_rank(Jc2, c2.ids)
    dp, Je1, Je2, dv, da = _bar_geometry(kin1, kin2, x1.v, x2.v, bar)
    M = _coupled_matrix(m1, m2, kin1, kin2, Jc1, Jc2, dp, Je1, Je2)
    n1, n2 = m1.n, m2.n
    rhs0 = np.concatenate([-kin1.H, -kin2.H, -Jd1, -Jd2, [-(dv @ dv) - dp @ da]])
    N = M.shape[0]
    B1 = np.zeros((N, m1.m))
    B2 = np.zeros((N, m2.m))
    B1[:n1] = m1.B
    B2[n1:n1 + n2] = m2.B
    return M, rhs0, B1, B2, (Jc1.shape[0], Jc2.shape[0])


def coupled_fd(m1: RobotModel, m2: RobotModel, domains, xa: AugmentedState, u1, u2,
               bar: BarConstraint):
    """Coupled constrained dynamics.  Returns (q1'', q2'', lam1, lam2, lam_e)."""
    M, rhs0, B1, B2, (k1, k2) = coupled_terms(m1, m2, domains, xa, bar)
    rhs = rhs0 + B1 @ np.asarray(u1, dtype=float) + B2 @ np.asarray(u2, dtype=float)
    sol = _coupled_solve(M, rhs, (domains[0].ids, domains[1].ids))
    return _split(sol, m1.n, m2.n, k1, k2)


def extended_contacts(graph_specs, v, v_next) -> ContactSet:
    """Contact set imposed on one agent at a product transition.

    A staying agent keeps its current contacts; a switching agent takes the
    contacts of its next domain.
    """
    return graph_specs[v].contacts if v_next == v else graph_specs[v_next].contacts


def coupled_impact(m1: RobotModel, m2: RobotModel, new_contacts, xa: AugmentedState,
                   bar: BarConstraint):
    """Impulsive coupled reset with extended contact sets ``new_contacts = (C1, C2)``.

    Returns (v1+, v2+, dlam1, dlam2, dlam_e); positions are unchanged.
    """
    c1, c2 = new_contacts
    x1, x2 = xa.agent1, xa.agent2
    kin1 = m1.evaluate(x1.q, x1.v)
    kin2 = m2.evaluate(x2.q, x2.v)
    Jc1, _ = c1.stack(m1, kin1)
    Jc2, _ = c2.stack(m2, kin2)
    _check_rank(Jc1, c1.ids)
    _check_rank(Jc2, c2.ids)
    dp, Je1, Je2, _, _ = _bar_geometry(kin1, kin2, x1.v, x2.v, bar)
    M = _coupled_matrix(m1, m2, kin1, kin2, Jc1, Jc2, dp, Je1, Je2)
    rhs = np.zeros(M.shape[0])
    rhs[:m1.n] = kin1.D @ x1.v
    rhs[m1.n:m1.n + m2.n] = kin2.D @ x2.v
    sol = _coupled_solve(M, rhs, (c1.ids, c2.ids))
    return _split(sol, m1.n, m2.n, Jc1.shape[0], Jc2.shape[0])
