"""Periodic gaits: per-domain spline trajectories, phasing, translation.

Each domain stores knot values and tau-derivatives of the configuration and of
the desired speed, interpolated by cubic Hermite splines.  Refined gaits also
store second tau-derivatives of the configuration, which upgrades q* to a
quintic Hermite interpolant.  Horizontal base
positions are stored along the cycle, with domain 1 entered at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.interpolate import BPoly, CubicHermiteSpline

from .model import AgentState, RobotModel

GAIT_VERSION = 1


def phase(t_entry: float, t: float, T_v: float) -> float:
    """Scaled time in the current domain, clamped at 1 when a guard fires late."""
    return min((t - t_entry) / T_v, 1.0)


def translate(x: AgentState, d, model: RobotModel | None = None) -> AgentState:
    """Shift the horizontal base position by d (1 or 2 components used)."""
    d = np.asarray(d, dtype=float).ravel()
    if model is not None:
        idx = model.horizontal_indices
        if not idx:
            raise ValueError("translate needs a floating-base model")
    else:
        idx = (0, 1)[:len(d)]
    q = np.array(x.q)
    for k, i in enumerate(idx):
        if k < len(d):
            q[i] = q[i] + d[k]
    return AgentState(q, x.v)


@dataclass(frozen=True, eq=False)
class DomainTrajectory:
    id: int
    duration: float
    tau: np.ndarray            # (K,)
    q: np.ndarray              # (K, n)
    dq: np.ndarray             # (K, n) derivative with respect to tau
    s: np.ndarray              # (K,)
    ds: np.ndarray             # (K,)
    u: np.ndarray              # (K, m)
    ddq: np.ndarray | None = None   # (K, n) second derivative with respect to tau

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"domain {self.id}: duration must be positive")
        for name in ("tau", "q", "dq", "s", "ds", "u"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.tau[0] != 0.0 or self.tau[-1] != 1.0 or np.any(np.diff(self.tau) <= 0):
            raise ValueError(f"domain {self.id}: knots must increase from 0 to 1")
        if self.ddq is not None:
            ddq = np.asarray(self.ddq, dtype=float)
            object.__setattr__(self, "ddq", ddq)
            qsp = BPoly.from_derivatives(self.tau, [np.stack([a, b, c]) for a, b, c
                                                    in zip(self.q, self.dq, ddq)])
        else:
            qsp = CubicHermiteSpline(self.tau, self.q, self.dq, axis=0)
        ssp = CubicHermiteSpline(self.tau, self.s, self.ds)
        object.__setattr__(self, "_sp", (qsp, qsp.derivative(1), qsp.derivative(2)))
        object.__setattr__(self, "_ssp", (ssp, ssp.derivative(1), ssp.derivative(2)))
        if self.u.size:
            usp = CubicHermiteSpline(self.tau, self.u, np.gradient(self.u, self.tau, axis=0), axis=0)
        else:
            usp = None
        object.__setattr__(self, "_usp", usp)

    def eval(self, tau: float, order: int = 0) -> np.ndarray:
        """Stacked [q*, s*] or its tau-derivative of the given order."""
        return np.append(self._sp[order](tau), self._ssp[order](tau))


@dataclass(frozen=True, eq=False)
class DesiredState:
    domain: int
    tau: float
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray
    s: float
    sdot: float
    memo: dict = field(default_factory=dict, repr=False)   # derived quantities


@dataclass(frozen=True, eq=False)
class Gait:
    """Periodic gait over the cycle ``order`` of domain ids."""

    model_name: str
    order: tuple[int, ...]
    domains: dict
    speed_index: int = 0        # horizontal coordinate along the walking direction
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if set(self.order) != set(self.domains):
            raise ValueError("gait order must list every domain exactly once")
        k = self.speed_index
        first, last = self.domains[self.order[0]], self.domains[self.order[-1]]
        object.__setattr__(self, "stride", float(last.q[-1, k] - first.q[0, k]))
        object.__setattr__(self, "_cache", {})

    @property
    def period(self) -> float:
        return float(sum(self.domains[v].duration for v in self.order))

    def duration(self, v: int) -> float:
        return self.domains[v].duration

    @property
    def durations(self) -> dict:
        return {v: self.domains[v].duration for v in self.order}

    def x_star(self, v: int, tau: float) -> float:
        """Horizontal position along the cycle."""
        return float(self.domains[v].eval(tau)[self.speed_index])

    def desired(self, v: int, tau: float) -> DesiredState:
        key = (v, float(tau))
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) >= 64:
                self._cache.pop(next(iter(self._cache)))
            hit = self._cache[key] = self._desired(v, float(tau))
        return hit

    def _desired(self, v: int, tau: float) -> DesiredState:
        dom = self.domains[v]
        T = dom.duration
        y0 = dom.eval(tau)
        y1 = dom.eval(tau, 1)
        y2 = dom.eval(tau, 2)
        n = y0.size - 1
        q = y0[:n]
        qd = y1[:n] / T
        qdd = y2[:n] / (T * T)
        for a in (q, qd, qdd):
            a.flags.writeable = False
        return DesiredState(v, tau, q, qd, qdd, float(y0[n]), float(y1[n] / T))

    def u_star(self, v: int, tau: float) -> np.ndarray:
        sp = self.domains[v]._usp
        return np.zeros(0) if sp is None else sp(tau)

    def locate(self, t: float) -> tuple[int, float]:
        """Domain and phase at time t along the periodic orbit, t in [0, T)."""
        t = float(t) % self.period
        for v in self.order:
            T = self.domains[v].duration
            if t < T:
                return v, t / T
            t -= T
        return self.order[-1], 1.0

    def state(self, t: float) -> tuple[int, float, AgentState]:
        """Orbit sampler phi*(t): (domain, tau, state); x advances one stride per period."""
        laps = np.floor(t / self.period)
        v, tau = self.locate(t)
        des = self.desired(v, tau)
        q = des.q.copy()
        q[self.speed_index] += laps * self.stride
        return v, tau, AgentState(q, des.v)

    def with_durations(self, durations: dict) -> "Gait":
        doms = {v: replace(self.domains[v], duration=float(durations.get(v, self.domains[v].duration)))
                for v in self.order}
        return Gait(self.model_name, self.order, doms, self.speed_index, dict(self.meta))


@dataclass(frozen=True, eq=False)
class LiftedOrbit:
    gait: Gait
    d: np.ndarray
    model: RobotModel

    def __call__(self, t: float):
        v, tau, x1 = self.gait.state(t)
        return (v, v), (tau, tau), x1, translate(x1, self.d[:len(self.model.horizontal_indices)],
                                                 self.model)


def lift_orbit(gait: Gait, d, model: RobotModel) -> LiftedOrbit:
    """Sampler of the two-agent orbit (phi*(t), T_d(phi*(t)))."""
    d = np.asarray(d, dtype=float)
    if np.allclose(d, 0.0):
        raise ValueError("d must be nonzero: agents would coincide")
    return LiftedOrbit(gait, d, model)


# -------------------------------------------------------------- file I/O

def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def gait_to_dict(g: Gait) -> dict:
    doms = []
    for v in g.order:
        d = g.domains[v]
        doc = {"id": int(v), "duration": float(d.duration), "tau": _arr(d.tau),
               "q_star": _arr(d.q), "dq_star": _arr(d.dq), "s_star": _arr(d.s),
               "ds_star": _arr(d.ds), "u_star": _arr(d.u)}
        if d.ddq is not None:
            doc["ddq_star"] = _arr(d.ddq)
        doms.append(doc)
    return {"gait_version": GAIT_VERSION, "model": g.model_name, "speed_index": g.speed_index,
            "order": [int(v) for v in g.order], "meta": g.meta, "domains": doms}


def gait_from_dict(doc: dict) -> Gait:
    if doc.get("gait_version") != GAIT_VERSION:
        raise ValueError(f"unsupported gait_version {doc.get('gait_version')}")
    doms = {}
    for i, d in enumerate(doc["domains"]):
        try:
            doms[int(d["id"])] = DomainTrajectory(
                int(d["id"]), float(d["duration"]), d["tau"], d["q_star"], d["dq_star"],
                d["s_star"], d["ds_star"], np.asarray(d.get("u_star", []), dtype=float).reshape(
                    len(d["tau"]), -1), d.get("ddq_star"))
        except KeyError as exc:
            raise ValueError(f"domains[{i}]: missing key {exc}") from exc
    return Gait(doc.get("model", ""), tuple(doc["order"]), doms, int(doc.get("speed_index", 0)),
                doc.get("meta", {}) or {})


def save_gait(g: Gait, path) -> None:
    Path(path).write_text(yaml.safe_dump(gait_to_dict(g), sort_keys=False, width=200))


def load_gait(path) -> Gait:
    return gait_from_dict(yaml.safe_load(Path(path).read_text()))


# ------------------------------------------------------------ refinement

class ShootingError(RuntimeError):
    pass


@dataclass
class RefineResult:
    gait: Gait
    fixed_point: np.ndarray        # state at entry to the first domain, x = 0
    residual: float                # max |P(x*) - x*| over quotient coordinates
    newton_steps: int
    rounds: int
    history: list = field(default_factory=list)


def _keep(model: RobotModel) -> np.ndarray:
    return np.setdiff1d(np.arange(2 * model.n), model.horizontal_indices)


def shoot(system, x0, gait: Gait, model: RobotModel, cfg=None, tol: float = 1e-8,
          max_iter: int = 50, fd_step: float = 1e-6, x_init=None):
    """Newton iteration on the quotient return map to the entry of gait.order[0].

    Returns (x*, residual, steps).  The Jacobian is recomputed only when a
    step fails to halve the residual (chord updates otherwise).
    """
    from .analysis import Section, poincare_map
    from .hybrid import ExecutorConfig
    cfg = cfg or ExecutorConfig(record=False)
    section = Section((gait.order[0],))
    keep = _keep(model)
    hidx = list(model.horizontal_indices)

    def F(x):
        y, _ = poincare_map(system, x, section, cfg, period_hint=gait.period)
        return y[keep] - x[keep]

    x = np.array(x0 if x_init is None else x_init, dtype=float)
    x[hidx] = 0.0
    r = F(x)
    res = float(np.max(np.abs(r)))
    steps = 0
    J = None
    while res >= tol:
        if steps >= max_iter:
            raise ShootingError(f"shooting did not converge in {max_iter} iterations "
                                f"(residual {res:.3e})")
        if J is None:
            J = np.empty((keep.size, keep.size))
            for c, k in enumerate(keep):
                h = fd_step * max(1.0, abs(x[k]))
                xp = x.copy()
                xp[k] += h
                J[:, c] = (F(xp) - r) / h
            if np.linalg.cond(J) > 1e12:
                raise ShootingError("shooting Jacobian is singular")
        dz = np.linalg.solve(J, -r)
        xn = x.copy()
        xn[keep] += dz
        rn = F(xn)
        resn = float(np.max(np.abs(rn)))
        steps += 1
        if resn > 0.5 * res:
            J = None               # stale chord: rebuild next iteration
        x, r, res = xn, rn, resn
    return x, res, steps


def sample_cycle(system, x0, gait: Gait, model: RobotModel, spec, knots: int,
                 substeps: int = 8) -> Gait:
    """Re-integrate one cycle from x0 and store it as a gait with ``knots`` knots
    per domain (RK4 steps aligned with the knots)."""
    from .control import speed_terms
    from .hybrid import Mode, _rk4
    n = model.n
    tau = np.linspace(0.0, 1.0, knots)
    x = np.array(x0, dtype=float)
    t = 0.0
    doms = {}
    for v in gait.order:
        T = gait.duration(v)
        mode = Mode((v,), (t,))
        h = T / ((knots - 1) * substeps)
        Q, dQ, ddQ, S, dS, U = [], [], [], [], [], []
        for k in range(knots):
            if k:
                for _ in range(substeps):
                    x = _rk4(lambda tt, xx: system.rhs(tt, xx, mode), t, x, h)
                    t += h
                t = mode.t_entry[0] + tau[k] * T
            a, u, _ = system.accel(t, x, mode)
            kin = model.evaluate(x[:n], x[n:], need_dyn=False)
            s, Js, jdv = speed_terms(model, spec, kin, x[n:])
            Q.append(x[:n].copy())
            dQ.append(T * x[n:])
            ddQ.append(T * T * a)
            S.append(s)
            dS.append(T * (Js @ a + jdv))
            U.append(u)
        doms[v] = DomainTrajectory(v, T, tau, np.array(Q), np.array(dQ), np.array(S),
                                   np.array(dS), np.array(U), np.array(ddQ))
        x, mode, *_ = system.reset(t, x, mode, (True,))
    meta = dict(gait.meta)
    return Gait(gait.model_name, gait.order, doms, gait.speed_index, meta)


def refine_periodic(gait0: Gait, model: RobotModel, graph, spec, params=None, *, knots=None,
                    rounds: int = 8, tol: float = 1e-8, knot_tol: float = 1e-9,
                    max_iter: int = 50, cfg=None, x_init=None, substeps: int = 8,
                    log=None) -> RefineResult:
    """Shooting refinement of a seed gait under the nominal controller.

    Each round finds the fixed point of the quotient return map for the current
    gait, then replaces the gait splines by the resampled closed-loop cycle.
    Rounds stop once the knots move by less than ``knot_tol``.
    """
    from .control import ControllerParams, NominalController
    from .hybrid import AgentSystem
    params = params or ControllerParams()
    knots = knots or len(gait0.domains[gait0.order[0]].tau)
    gait = gait0
    x = None
    if x_init is None:
        _, _, st = gait0.state(0.0)
        x_init = st.x
    history = []
    total = 0
    res = np.inf
    for rnd in range(1, rounds + 1):
        system = AgentSystem(model, graph, NominalController(model, graph, gait, spec, params),
                             gait.durations)
        x, res, steps = shoot(system, x_init, gait, model, cfg, tol, max_iter, x_init=x_init)
        total += steps
        new = sample_cycle(system, x, gait, model, spec, knots, substeps)
        change = max(float(np.max(np.abs(new.domains[v].q - gait.domains[v].q)))
                     if gait.domains[v].q.shape == new.domains[v].q.shape else np.inf
                     for v in gait.order)
        history.append({"round": rnd, "newton_steps": steps, "residual": res,
                        "knot_change": change})
        if log is not None:
            log(history[-1])
        gait = new
        x_init = x
        if change < knot_tol:
            break
    # final fixed point on the refined gait
    system = AgentSystem(model, graph, NominalController(model, graph, gait, spec, params),
                         gait.durations)
    x, res, steps = shoot(system, x, gait, model, cfg, tol, max_iter, x_init=x)
    total += steps
    meta = dict(gait.meta)
    meta.update({"source": "shooting refinement", "fixed_point": [float(v) for v in x],
                 "fixed_point_residual": res, "rounds": len(history),
                 "dt": float(cfg.dt) if cfg is not None else 1e-3})
    gait = Gait(gait.model_name, gait.order, gait.domains, gait.speed_index, meta)
    return RefineResult(gait, x, res, total, len(history), history)
