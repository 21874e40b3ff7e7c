"""The planar walker fixture: 8-domain gait graph, outputs and a seed gait.

Stride: domain 1 double support (foot A in front), 2-4 single support on A,
5 double support (foot B in front), 6-8 single support on B.  Touchdown edges
4->5 and 8->1 are plastic impacts; all other edges are lift-off or phase
boundaries with identity resets.  Every edge is phase-triggered so that two
agents started together stay on the product diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .control import OutputSpec
from .dynamics import ContactSet
from .gait import DomainTrajectory, Gait
from .hybrid import IDENTITY, IMPACT, DomainSpec, GaitGraph, Guard
from .model import RobotModel, load_model

X, Y, PITCH, HIP_A, KNEE_A, HIP_B, KNEE_B = range(7)
DS = ContactSet(("foot_a", "foot_b"))
SS_A = ContactSet(("foot_a",))
SS_B = ContactSet(("foot_b",))


def data_path(name: str):
    return resources.files("coopgait") / "data" / name


def walker_model() -> RobotModel:
    return load_model(str(data_path("planar_walker.yaml")))


def walker_graph(touchdown_guard: str = "phase-complete") -> GaitGraph:
    """8-domain cycle.  ``touchdown_guard='swing-height'`` ends 4 and 8 on foot height."""
    def td(point):
        if touchdown_guard == "swing-height":
            return Guard("swing-height", point, 0.05)
        return Guard()
    return GaitGraph((
        DomainSpec(1, DS, Guard(), IDENTITY),
        DomainSpec(2, SS_A, Guard(), IDENTITY),
        DomainSpec(3, SS_A, Guard(), IDENTITY),
        DomainSpec(4, SS_A, td("foot_b"), IMPACT),
        DomainSpec(5, DS, Guard(), IDENTITY),
        DomainSpec(6, SS_B, Guard(), IDENTITY),
        DomainSpec(7, SS_B, Guard(), IDENTITY),
        DomainSpec(8, SS_B, td("foot_a"), IMPACT),
    ))


def _rows(*pairs, n=7):
    C = np.zeros((len(pairs), n))
    for r, cols in enumerate(pairs):
        for c, val in cols:
            C[r, c] = val
    return C


def walker_outputs() -> OutputSpec:
    """Double support: height and pitch.  Single support: height, absolute
    swing-leg angle and swing-leg extension; pitch is left free and absorbs the
    head-speed regulation."""
    ds = _rows([(Y, 1.0)], [(PITCH, 1.0)])
    ss_a = _rows([(Y, 1.0)], [(PITCH, 1.0), (HIP_B, 1.0)], [(KNEE_B, 1.0)])
    ss_b = _rows([(Y, 1.0)], [(PITCH, 1.0), (HIP_A, 1.0)], [(KNEE_A, 1.0)])
    C = {1: ds, 2: ss_a, 3: ss_a, 4: ss_a, 5: ds, 6: ss_b, 7: ss_b, 8: ss_b}
    return OutputSpec(C, roll_col=None, pitch_col=PITCH)


@dataclass(frozen=True)
class SeedParams:
    height: float = 0.85
    t_double: float = 0.25
    t_single: float = 0.25
    apex_speed: float = 0.45     # hip speed over the stance foot
    clearance: float = 0.25
    leg_offset: float = 0.9
    knots: int = 8


def _leg_ik(hip, foot, pitch, L0):
    dx, dy = foot[0] - hip[0], foot[1] - hip[1]
    ell = np.hypot(dx, dy)
    return np.arctan2(dx, -dy) - pitch, ell - L0


class _Seed:
    """Hip follows the linear inverted pendulum in single support and moves at
    constant speed in double support; feet follow smooth swing arcs."""

    def __init__(self, p: SeedParams):
        self.p = p
        w = np.sqrt(9.81 / p.height)
        self.w = w
        self.c = p.apex_speed / w
        half = p.t_single / 2.0
        self.a = self.c * np.sinh(w * half)
        self.vmax = self.c * w * np.cosh(w * half)
        self.step = 2 * self.a + self.vmax * p.t_double
        self.T_step = p.t_double + p.t_single
        self.xa = self.vmax * p.t_double + self.a

    def hip_x(self, t):
        p = self.p
        k, r = divmod(t, self.T_step)
        base = k * self.step
        if r <= p.t_double:
            return base + self.vmax * r
        foot = self.xa + k * self.step
        return foot + self.c * np.sinh(self.w * (r - p.t_double - p.t_single / 2.0))

    def swing(self, x0, x1, sig):
        return np.array([x0 + (x1 - x0) * (3 * sig**2 - 2 * sig**3),
                         self.p.clearance * sig**2 * (1 - sig)])

    def __call__(self, t):
        p, L = self.p, self.step
        td, T = p.t_double, self.T_step
        hip = np.array([self.hip_x(t), p.height])
        xa, xb = self.xa, self.xa + L
        if t <= T + td:
            fa = np.array([xa, 0.0])
        else:
            fa = self.swing(xa, xa + 2 * L, (t - T - td) / p.t_single)
        if t <= td:
            fb = np.array([xb - 2 * L, 0.0])
        elif t <= T:
            fb = self.swing(xb - 2 * L, xb, (t - td) / p.t_single)
        else:
            fb = np.array([xb, 0.0])
        ha, ka = _leg_ik(hip, fa, 0.0, p.leg_offset)
        hb, kb = _leg_ik(hip, fb, 0.0, p.leg_offset)
        return np.array([hip[0], hip[1], 0.0, ha, ka, hb, kb])


REFINE_DT = 2e-3


def settle(gait: Gait, model: RobotModel, graph: GaitGraph, spec: OutputSpec, params=None,
           cfg=None, tol: float = 1e-8, max_strides: int = 200) -> np.ndarray:
    """Iterate the single-agent return map from the gait's start until it settles.

    Gives shooting a starting point inside its basin.  Returns the state at
    entry to the first domain with the horizontal coordinates zeroed.
    """
    from .analysis import Section, poincare_map
    from .control import ControllerParams, NominalController
    from .hybrid import AgentSystem, ExecutorConfig
    cfg = cfg or ExecutorConfig(dt=REFINE_DT, record=False)
    system = AgentSystem(model, graph,
                         NominalController(model, graph, gait, spec, params or ControllerParams()),
                         gait.durations)
    hidx = list(model.horizontal_indices)
    x = gait.state(0.0)[2].x.copy()
    x[hidx] = 0.0
    for _ in range(max_strides):
        x1, _ = poincare_map(system, x, Section((gait.order[0],)), cfg, period_hint=gait.period)
        x1[hidx] = 0.0
        if np.max(np.abs(x1 - x)) < tol:
            return x1
        x = x1
    return x


def seed_configuration(t: float, p: SeedParams = SeedParams()) -> np.ndarray:
    """Analytic seed pose over one stride, t in [0, 2 (t_double + t_single)]."""
    return _Seed(p)(t)


def seed_gait(model: RobotModel, p: SeedParams = SeedParams()) -> Gait:
    ts = p.t_single / 3.0
    durations = [p.t_double, ts, ts, ts, p.t_double, ts, ts, ts]
    seed = _Seed(p)
    doms = {}
    t0 = 0.0
    eps = 1e-6
    for v, T in enumerate(durations, start=1):
        tau = np.linspace(0.0, 1.0, p.knots)
        q = np.array([seed(t0 + s * T) for s in tau])
        # one-sided differences at the domain ends keep lift-off/touchdown kinks out
        dq = []
        for s in tau:
            a = max(s - eps, 0.0)
            b = min(s + eps, 1.0)
            dq.append((seed(t0 + b * T) - seed(t0 + a * T)) / (b - a))
        dq = np.array(dq)
        doms[v] = DomainTrajectory(v, T, tau, q, dq, dq[:, X] / T,
                                   np.zeros(p.knots), np.zeros((p.knots, model.m)))
        t0 += T
    return Gait(model.name, tuple(range(1, 9)), doms, speed_index=0,
                meta={"source": "analytic seed", "seed_params": p.__dict__})


# ------------------------------------------------------------ coupled scenario

DEFAULT_D = (0.8, 0.6)
DEFAULT_BAR_LENGTH = 1.0


def walker_gait():
    """The delivered refined gait (closed-loop periodic under the nominal controller)."""
    from .gait import load_gait
    return load_gait(str(data_path("planar_walker_gait.yaml")))


def walker_params():
    """The delivered tuned distributed-controller parameters."""
    from .control import load_params
    return load_params(str(data_path("planar_walker_params.yaml")))


def planar_bar(d, length: float = DEFAULT_BAR_LENGTH):
    """Bar for planar agents: d[0] is the along-track offset of agent 2 and
    d[1] the lateral separation, realized as an out-of-plane end-effector offset."""
    from .dynamics import BarConstraint
    d = np.asarray(d, dtype=float)
    lateral = float(d[1]) if d.size > 1 else 0.0
    return BarConstraint(float(length), (0.0, 0.0, lateral))


@dataclass
class CoupledScenario:
    model: RobotModel
    model2: RobotModel
    graph: GaitGraph
    gait: Gait
    spec: OutputSpec
    bar: object
    d: np.ndarray
    controller: object
    system: object
    x_star: np.ndarray          # lifted fixed point at entry to (1, 1)
    section: object
    removed: list
    project: object
    geometry_mismatch: float


def coupled_scenario(gait: Gait | None = None, params=None, d=DEFAULT_D,
                     bar_length: float = DEFAULT_BAR_LENGTH, controller: str = "distributed",
                     model: RobotModel | None = None, model2: RobotModel | None = None,
                     theta_noise: float = 0.0, rng=None) -> CoupledScenario:
    """Two walkers on the lifted orbit of ``gait``, joined by the bar.

    ``controller`` is 'distributed' (local QPs) or 'nominal' (each agent runs
    its own nominal controller and ignores the bar).
    """
    from .analysis import Section, constraint_projector, quotient_indices
    from .control import (ControllerParams, CoupledNominalController,
                          DistributedController)
    from .gait import translate
    from .hybrid import CoupledSystem
    from .model import AgentState
    model = model or walker_model()
    model2 = model2 or model
    if model2.coord_names != model.coord_names:
        raise ValueError("both agents must share the same coordinate structure")
    gait = gait or walker_gait()
    params = params or ControllerParams()
    graph = walker_graph()
    spec = walker_outputs()
    d = np.asarray(d, dtype=float)
    if np.allclose(d, 0.0):
        raise ValueError("d must be nonzero")
    bar = planar_bar(d, bar_length)
    if controller == "distributed":
        ctl = DistributedController(model, graph, gait, spec, params, bar, d,
                                    theta_noise=theta_noise, rng=rng)
    elif controller == "nominal":
        ctl = CoupledNominalController(model, graph, gait, spec, params)
    else:
        raise ValueError(f"unknown controller {controller!r}")
    system = CoupledSystem(model, model2, graph, bar, ctl, gait.durations)
    if "fixed_point" in gait.meta:
        x1 = np.array(gait.meta["fixed_point"], dtype=float)
    else:
        x1 = gait.state(0.0)[2].x
    a1 = AgentState.from_vector(x1)
    a2 = translate(a1, d[:len(model.horizontal_indices)], model)
    x_star = np.concatenate([a1.x, a2.x])
    p1 = model.evaluate(a1.q, a1.v, need_dyn=False).pos("end_effector")
    p2 = model2.evaluate(a2.q, a2.v, need_dyn=False).pos("end_effector")
    mismatch = abs(bar.residual(p1, p2))
    first = graph.spec(gait.order[0]).contacts
    project = constraint_projector(model, model2, (first, first), bar)
    return CoupledScenario(model, model2, graph, gait, spec, bar, d, ctl, system, x_star,
                           Section((gait.order[0], gait.order[0])),
                           quotient_indices(model, 2), project, mismatch)
