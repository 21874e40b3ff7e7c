"""Virtual constraints, I-O linearization and the nominal / distributed controllers.

Outputs in domain v:
    y_nh = s(q, qd) - s*(tau)          relative degree one (forward speed)
    s*(tau) is the speed-point velocity of the desired state, so y_nh vanishes
    identically along the stored trajectory.
    y_h  = C_v (q - q*(tau))           relative degree two
with PD stabilization e = [Kp y_nh; Kp y_h + Kd yd_h].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (BarConstraint, ContactSet, _coupled_solve, affine_decomposition,
                       coupled_terms)
from .gait import Gait, phase
from .model import AgentState, AugmentedState, Kinematics, RobotModel
from .qp import QpInfeasible, build_controller_qp, solve_qp

RANK_TOL = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class OutputSpec:
    """Per-domain output matrices and the labels used by the cross-agent terms."""

    C: dict
    roll_col: int | None = None
    pitch_col: int | None = None
    speed_point: str = "speed_point"
    speed_axis: int = 0

    def __post_init__(self):
        object.__setattr__(self, "C", {int(k): np.atleast_2d(np.asarray(v, dtype=float))
                                       for k, v in self.C.items()})

    def validate(self, model: RobotModel) -> None:
        for v, C in self.C.items():
            if C.shape[1] != model.n:
                raise ValueError(f"C[{v}] must have {model.n} columns")
            if C.shape[0] + 1 > model.m:
                raise ValueError(f"C[{v}]: rows + 1 exceeds the number of actuators")
            for h in model.horizontal_indices:
                if np.any(C[:, h] != 0):
                    raise ValueError(f"C[{v}] depends on horizontal coordinate {h}")

    def rows(self, v: int) -> int:
        return self.C[v].shape[0] + 1

    def col(self, v: int, which: str) -> np.ndarray | None:
        c = self.roll_col if which == "roll" else self.pitch_col
        return None if c is None else self.C[v][:, c]


@dataclass(frozen=True)
class ControllerParams:
    alpha: object = 0.5
    beta: object = 0.5
    gamma: object = 0.5
    kp: float = 100.0
    kd: float = 20.0
    qp_weight: float = 1e2
    u_min: float = -200.0
    u_max: float = 200.0
    delta_min: float = -1e3
    delta_max: float = 1e3

    def __post_init__(self):
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError("gains must be positive")
        if not self.qp_weight > 0:
            raise ValueError("qp_weight must be positive")
        if not (np.all(np.asarray(self.u_min) < np.asarray(self.u_max))
                and self.delta_min < self.delta_max):
            raise ValueError("lower bounds must be below upper bounds")

    def coeff(self, name: str, vw) -> float:
        val = getattr(self, name)
        if isinstance(val, dict):
            return float(val.get(tuple(vw), val.get("default", 0.0)))
        return float(val)


_COUPLING = ("alpha", "beta", "gamma")


def _coeff_from_doc(val, name):
    if isinstance(val, dict):
        table = {}
        for k, c in val.items():
            if k == "default":
                table["default"] = float(c)
                continue
            try:
                v, w = (int(p) for p in str(k).split(","))
            except ValueError:
                raise ValueError(f"{name}: product-vertex key must look like 'v,w', got {k!r}")
            table[(v, w)] = float(c)
        return table
    return float(val)


def params_from_dict(doc: dict) -> ControllerParams:
    """Build parameters from a mapping; alpha/beta/gamma may be scalars or
    tables keyed by 'v,w' with an optional 'default'."""
    known = {f for f in ControllerParams.__dataclass_fields__}
    extra = set(doc) - known - {"format", "version", "notes"}
    if extra:
        raise ValueError(f"unknown parameter keys: {sorted(extra)}")
    kw = {k: v for k, v in doc.items() if k in known}
    for name in _COUPLING:
        if name in kw:
            kw[name] = _coeff_from_doc(kw[name], name)
    for name in ("kp", "kd", "qp_weight", "delta_min", "delta_max"):
        if name in kw:
            kw[name] = float(kw[name])
    for name in ("u_min", "u_max"):
        if name in kw:
            kw[name] = np.asarray(kw[name], dtype=float) if isinstance(kw[name], list) \
                else float(kw[name])
    return ControllerParams(**kw)


def params_to_dict(p: ControllerParams) -> dict:
    out = {}
    for name in ControllerParams.__dataclass_fields__:
        val = getattr(p, name)
        if isinstance(val, dict):
            val = {(k if k == "default" else f"{k[0]},{k[1]}"): float(c) for k, c in val.items()}
        elif isinstance(val, np.ndarray):
            val = [float(c) for c in val]
        else:
            val = float(val)
        out[name] = val
    return out


def load_params(path) -> ControllerParams:
    import yaml
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError("parameter file must be a mapping")
    return params_from_dict(doc)


# ------------------------------------------------------------------ outputs

def speed_terms(model: RobotModel, spec: OutputSpec, kin: Kinematics, v):
    """(s, J_s row, Jdot_s v) for the forward-speed point."""
    a = spec.speed_axis
    Js = kin.jac(spec.speed_point)[a]
    return float(Js @ v), Js, float(kin.jdv(spec.speed_point)[a])


def desired_speed(model: RobotModel, spec: OutputSpec, des) -> tuple[float, float]:
    """(s*, s*') evaluated kinematically on the desired state (q*, q*', q*'')."""
    key = (id(model), spec.speed_point, spec.speed_axis)
    hit = des.memo.get(key)
    if hit is None:
        kin = model.evaluate(des.q, des.v, need_dyn=False)
        Js = kin.jac(spec.speed_point)[spec.speed_axis]
        hit = des.memo[key] = (float(Js @ des.v),
                               float(Js @ des.a + kin.jdv(spec.speed_point)[spec.speed_axis]))
    return hit


def virtual_constraints(spec: OutputSpec, gait: Gait, model: RobotModel, v: int, tau: float,
                        x: AgentState, kin: Kinematics | None = None):
    """(y_nh, y_h, yd_h) at phase tau of domain v."""
    if kin is None:
        kin = model.evaluate(x.q, x.v, need_dyn=False)
    des = gait.desired(v, tau)
    s, _, _ = speed_terms(model, spec, kin, x.v)
    C = spec.C[v]
    return s - desired_speed(model, spec, des)[0], C @ (x.q - des.q), C @ (x.v - des.v)


def _gains(params: ControllerParams, r: int):
    return params.kp, params.kd


def io_terms(spec: OutputSpec, gait: Gait, model: RobotModel, v: int, tau: float, x: AgentState,
             params: ControllerParams = ControllerParams(), kin: Kinematics | None = None,
             acc=None, outputs=None, contacts: ContactSet | None = None):
    """(A_v, b_v, e_v) for q'' = f + g u on the contacts of domain v.

    ``acc = (f, g)`` replaces the single-agent decomposition and
    ``outputs = (y_nh, y_h, yd_h)`` replaces the regulated outputs.
    """
    if kin is None:
        kin = model.evaluate(x.q, x.v)
    if acc is None:
        if contacts is None:
            raise ValueError("io_terms needs either contacts or acc")
        f, g, _, _ = affine_decomposition(model, contacts, x, kin)
    else:
        f, g = acc
    des = gait.desired(v, tau)
    s_des, sdot_des = desired_speed(model, spec, des)
    s, Js, jds = speed_terms(model, spec, kin, x.v)
    C = spec.C[v]
    A = np.vstack([Js @ g, C @ g])
    b = np.concatenate([[Js @ f + jds - sdot_des], C @ f - C @ des.a])
    if outputs is None:
        y_nh, y_h, yd_h = s - s_des, C @ (x.q - des.q), C @ (x.v - des.v)
    else:
        y_nh, y_h, yd_h = outputs
    kp, kd = _gains(params, C.shape[0])
    e = np.concatenate([[kp * y_nh], kp * y_h + kd * yd_h])
    return A, b, e


def _min_norm(A, rhs, strict: bool = True):
    """Minimum-norm u with A u = -rhs.  A rank-deficient A is an error unless
    ``strict`` is off, in which case the least-squares solution is returned."""
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < RANK_TOL:
        if strict:
            raise RankDeficientError(
                f"decoupling matrix rank deficient (min singular value {sv[-1]:.3e})")
        return -np.linalg.lstsq(A, rhs, rcond=RANK_TOL)[0]
    return -A.T @ np.linalg.solve(A @ A.T, rhs)


def nominal_controller(spec: OutputSpec, gait: Gait, model: RobotModel, contacts: ContactSet,
                       v: int, tau: float, x: AgentState,
                       params: ControllerParams = ControllerParams(), kin=None) -> np.ndarray:
    """u = -A'(AA')^{-1}(b + e) on the single-agent dynamics of domain v."""
    if kin is None:
        kin = model.evaluate(x.q, x.v)
    f, g, _, _ = affine_decomposition(model, contacts, x, kin)
    A, b, e = io_terms(spec, gait, model, v, tau, x, params, kin, acc=(f, g))
    return _min_norm(A, b + e)


# ------------------------------------------------------- cross-agent terms

@dataclass(frozen=True)
class MeasurableGlobals:
    """Speeds, roll/pitch angles and rates of both agents, and the domain pair."""

    s: tuple[float, float]
    roll: tuple[float, float]
    pitch: tuple[float, float]
    roll_rate: tuple[float, float]
    pitch_rate: tuple[float, float]
    domains: tuple[int, int]

    @classmethod
    def extract(cls, model: RobotModel, spec: OutputSpec, xa: AugmentedState, domains,
                kins=None) -> "MeasurableGlobals":
        s, r, p, rd, pd = [], [], [], [], []
        for k, x in enumerate((xa.agent1, xa.agent2)):
            kin = kins[k] if kins is not None else model.evaluate(x.q, x.v, need_dyn=False)
            s.append(speed_terms(model, spec, kin, x.v)[0])
            ri, pi = model.roll_index, model.pitch_index
            r.append(float(x.q[ri]) if ri is not None else 0.0)
            rd.append(float(x.v[ri]) if ri is not None else 0.0)
            p.append(float(x.q[pi]) if pi is not None else 0.0)
            pd.append(float(x.v[pi]) if pi is not None else 0.0)
        return cls(tuple(s), tuple(r), tuple(p), tuple(rd), tuple(pd), tuple(domains))

    def perturbed(self, rng: np.random.Generator, sigma: float) -> "MeasurableGlobals":
        def noisy(pair):
            return tuple(float(c) for c in np.asarray(pair) + sigma * rng.standard_normal(2))
        return MeasurableGlobals(noisy(self.s), noisy(self.roll), noisy(self.pitch),
                                 noisy(self.roll_rate), noisy(self.pitch_rate), self.domains)


def modified_outputs(spec: OutputSpec, gait: Gait, params: ControllerParams, model: RobotModel,
                     vw, taus, x_i: AgentState, theta: MeasurableGlobals, i: int,
                     kin: Kinematics | None = None):
    """Agent-i outputs corrected by agent j's speed, roll and pitch errors.

    ``vw = (v, w)`` and ``taus = (tau_i, tau_j)`` are agent i's and agent j's
    domains and phases; agent j's errors use its own phase.
    """
    v, w = vw
    tau_i, tau_j = taus
    j = 1 - i
    y_nh, y_h, yd_h = virtual_constraints(spec, gait, model, v, tau_i, x_i, kin)
    des_j = gait.desired(w, tau_j)
    alpha = params.coeff("alpha", (v, w))
    y_nh = y_nh - alpha * (theta.s[j] - desired_speed(model, spec, des_j)[0])
    for name, coef, ang, rate, idx in (
            ("roll", "beta", theta.roll, theta.roll_rate, model.roll_index),
            ("pitch", "gamma", theta.pitch, theta.pitch_rate, model.pitch_index)):
        c = spec.col(v, name)
        if c is None or idx is None:
            continue
        k = params.coeff(coef, (v, w))
        y_h = y_h - k * c * (ang[j] - des_j.q[idx])
        yd_h = yd_h - k * c * (rate[j] - des_j.v[idx])
    return y_nh, y_h, yd_h


def approx_partner_state(gait: Gait, model: RobotModel, vw, taus, x_i: AgentState,
                         d_rel) -> AgentState:
    """Agent j replaced by its desired state at (tau_j, w), placed at offset d_rel
    relative to where agent i's own desired trajectory puts it."""
    v, w = vw
    tau_i, tau_j = taus
    des = gait.desired(w, tau_j)
    q = des.q.copy()
    k = gait.speed_index
    # unwrap so that the partner's cumulative position is nearest to agent i's
    xi = gait.x_star(v, tau_i)
    xj = gait.x_star(w, tau_j)
    S = gait.stride
    shift = np.round((xi - xj) / S) * S if S != 0 else 0.0
    q[k] = x_i.q[k] - xi + xj + shift + d_rel[0]
    for c, h in enumerate(model.horizontal_indices[1:], start=1):
        q[h] = x_i.q[h] - gait.desired(v, tau_i).q[h] + des.q[h] + d_rel[c]
    return AgentState(q, des.v)


def approx_coupled_dynamics(model: RobotModel, gait: Gait, contacts_vw, vw, taus, x_i, x_j_hat,
                            u_j_star, bar: BarConstraint, kin_i=None, kin_j=None):
    """Agent-i rows of the coupled dynamics with agent j at its approximate state.

    Returns (D_i, H_hat, B_ii, B_ij, f_hat, g_ii, g_ij) with
    D_i q_i'' + H_hat = B_ii u_i + B_ij u_j and q_i'' = f_hat + g_ii u_i + g_ij u_j.
    """
    if kin_i is None:
        kin_i = model.evaluate(x_i.q, x_i.v)
    if kin_j is None:
        kin_j = model.evaluate(x_j_hat.q, x_j_hat.v)
    xa = AugmentedState(x_i, x_j_hat)
    M, rhs0, B1, B2, _ = coupled_terms(model, model, contacts_vw, xa, bar, kin=(kin_i, kin_j))
    sol = _coupled_solve(M, np.column_stack([rhs0, B1, B2]), contacts_vw)
    n, m = model.n, model.m
    f_hat = sol[:n, 0]
    g_ii = sol[:n, 1:1 + m]
    g_ij = sol[:n, 1 + m:]
    D = kin_i.D
    return D, -D @ f_hat, D @ g_ii, D @ g_ij, f_hat, g_ii, g_ij


# ------------------------------------------------------------ controllers

def recentered(model: RobotModel, x: AgentState) -> AgentState:
    """Same state with the horizontal base coordinates set to zero.

    Outputs never depend on them (checked by OutputSpec.validate) and the
    dynamics are translation invariant, so evaluating controllers here makes
    them exactly, not just approximately, invariant to translations.
    """
    idx = list(model.horizontal_indices)
    if not idx:
        return x
    q = np.array(x.q)
    q[idx] = 0.0
    return AgentState(q, x.v)


class NominalController:
    """Single-agent HZD controller usable by the hybrid executor."""

    def __init__(self, model: RobotModel, graph, gait: Gait, spec: OutputSpec,
                 params: ControllerParams = ControllerParams()):
        spec.validate(model)
        self.model, self.graph, self.gait, self.spec, self.params = model, graph, gait, spec, params

    def control(self, v, tau, x: AgentState, kin=None):
        return nominal_controller(self.spec, self.gait, self.model, self.graph.spec(v).contacts,
                                  v, tau, x, self.params, kin)

    def __call__(self, t, xvec, mode):
        v = mode.domains[0]
        tau = phase(mode.t_entry[0], t, self.gait.duration(v))
        return self.control(v, tau, recentered(self.model, AgentState.from_vector(xvec)))

    def outputs(self, t, xvec, mode):
        v = mode.domains[0]
        tau = phase(mode.t_entry[0], t, self.gait.duration(v))
        return virtual_constraints(self.spec, self.gait, self.model, v, tau,
                                   AgentState.from_vector(xvec))


class CoupledNominalController:
    """Each agent applies its own nominal controller (no cross-agent terms, no QP)."""

    def __init__(self, model, graph, gait, spec, params=ControllerParams()):
        self.single = NominalController(model, graph, gait, spec, params)

    def __call__(self, t, xvec, mode):
        xa = AugmentedState.from_vector(xvec)
        us = []
        for a, x in enumerate((xa.agent1, xa.agent2)):
            v = mode.domains[a]
            tau = phase(mode.t_entry[a], t, self.single.gait.duration(v))
            us.append(self.single.control(v, tau, recentered(self.single.model, x)))
        return us[0], us[1]


@dataclass
class LocalSolution:
    u: np.ndarray
    u_nom: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    b: np.ndarray
    e: np.ndarray
    active: tuple = ()


class DistributedController:
    """Two local QP controllers sharing only the measurable globals Theta.

    Agent i sees its own state, Theta and the domain pair.  Agent j's state is
    approximated by the gait's desired state placed at the nominal offset d.
    ``theta_noise`` adds Gaussian noise (drawn from ``rng``) to the shared
    measurements; it is off by default.
    """

    def __init__(self, model: RobotModel, graph, gait: Gait, spec: OutputSpec,
                 params: ControllerParams, bar: BarConstraint, d,
                 theta_noise: float = 0.0, rng: np.random.Generator | None = None):
        spec.validate(model)
        self.model, self.graph, self.gait, self.spec, self.params = model, graph, gait, spec, params
        self.bar = bar
        self.d = np.asarray(d, dtype=float)
        nh = len(model.horizontal_indices)
        self._d_rel = (self.d[:nh], -self.d[:nh])
        off = np.asarray(bar.offset2, dtype=float)
        self._bars = (bar, BarConstraint(bar.length, tuple(-off)))
        self._warm = [None, None]
        self._partner_memo = [None, None]
        self.theta_noise = float(theta_noise)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def local(self, i: int, vw, taus, x_i: AgentState, theta: MeasurableGlobals,
              kin_i=None) -> LocalSolution:
        model, gait, spec, params = self.model, self.gait, self.spec, self.params
        v, w = vw
        if kin_i is None:
            kin_i = model.evaluate(x_i.q, x_i.v)
        c_v = self.graph.spec(v).contacts
        c_w = self.graph.spec(w).contacts
        # agent i's own nominal control
        f, g, _, _ = affine_decomposition(model, c_v, x_i, kin_i)
        A0, b0, e0 = io_terms(spec, gait, model, v, taus[0], x_i, params, kin_i, acc=(f, g))
        u_nom = _min_norm(A0, b0 + e0, strict=False)
        x_j, kin_j, u_j = self._partner(i, vw, taus, x_i, c_w)
        _, _, _, _, f_hat, g_ii, g_ij = approx_coupled_dynamics(
            model, gait, (c_v, c_w), vw, taus, x_i, x_j, u_j, self._bars[i], kin_i, kin_j)
        outs = modified_outputs(spec, gait, params, model, vw, taus, x_i, theta, i, kin_i)
        A, b, e = io_terms(spec, gait, model, v, taus[0], x_i, params, kin_i,
                           acc=(f_hat + g_ij @ u_j, g_ii), outputs=outs)
        prob = build_controller_qp(u_nom, A, b, e, params)
        res = solve_qp(prob, warm_active=self._warm[i])
        self._warm[i] = res.active
        m = model.m
        return LocalSolution(res.x[:m], u_nom, res.x[m:], A, b, e, res.active)

    def _partner(self, i, vw, taus, x_i, c_w):
        """Agent j's approximate state and feedforward.  With x_i recentered
        this depends only on (i, vw, taus); the last result is reused when
        they repeat (the two RK4 midpoint stages)."""
        model, gait, spec, params = self.model, self.gait, self.spec, self.params
        key = (i, tuple(vw), tuple(taus), tuple(x_i.q[list(model.horizontal_indices)]))
        hit = self._partner_memo[i]
        if hit is not None and hit[0] == key:
            return hit[1]
        x_j = approx_partner_state(gait, model, vw, taus, x_i, self._d_rel[i])
        kin_j = model.evaluate(x_j.q, x_j.v)
        fj, gj, _, _ = affine_decomposition(model, c_w, x_j, kin_j)
        Aj, bj, ej = io_terms(spec, gait, model, vw[1], taus[1], x_j, params, kin_j, acc=(fj, gj))
        val = (x_j, kin_j, _min_norm(Aj, bj + ej, strict=False))
        self._partner_memo[i] = (key, val)
        return val

    def __call__(self, t, xvec, mode):
        xa = AugmentedState.from_vector(xvec)
        xa = AugmentedState(recentered(self.model, xa.agent1), recentered(self.model, xa.agent2))
        kins = (self.model.evaluate(xa.agent1.q, xa.agent1.v),
                self.model.evaluate(xa.agent2.q, xa.agent2.v))
        theta = MeasurableGlobals.extract(self.model, self.spec, xa, mode.domains, kins)
        if self.theta_noise > 0:
            theta = theta.perturbed(self.rng, self.theta_noise)
        taus = [phase(mode.t_entry[a], t, self.gait.duration(mode.domains[a])) for a in (0, 1)]
        u1 = self.local(0, mode.domains, (taus[0], taus[1]), xa.agent1, theta, kins[0]).u
        u2 = self.local(1, mode.domains[::-1], (taus[1], taus[0]), xa.agent2, theta, kins[1]).u
        return u1, u2
