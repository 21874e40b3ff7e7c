"""Gait graphs, their strong product, and the hybrid executor.

The executor integrates with fixed-step RK4.  Guard crossings (positive to
non-positive) are localized inside a step by a bracketed root search on the
RK4 partial step, so the event state is consistent with the integrator.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .dynamics import (Baumgarte, BarConstraint, ContactSet, affine_decomposition,
                       constrained_fd, coupled_impact, coupled_terms, impact_map,
                       _coupled_solve, _split)
from .model import AgentState, AugmentedState, RobotModel

log = logging.getLogger(__name__)

IDENTITY = "identity"
IMPACT = "impact"
GUARD_KINDS = ("swing-height", "normal-force-zero", "phase-complete")


@dataclass(frozen=True)
class Guard:
    kind: str = "phase-complete"
    point: str | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in GUARD_KINDS:
            raise ValueError(f"unknown guard kind {self.kind!r}")
        if self.kind != "phase-complete" and self.point is None:
            raise ValueError(f"guard {self.kind} needs a point")
        if not self.scale > 0:
            raise ValueError("guard scale must be positive")


@dataclass(frozen=True)
class DomainSpec:
    id: int
    contacts: ContactSet
    guard: Guard = Guard()
    reset: str = IDENTITY       # kind of the outgoing edge

    def __post_init__(self):
        if self.reset not in (IDENTITY, IMPACT):
            raise ValueError(f"unknown reset kind {self.reset!r}")


@dataclass(frozen=True)
class GaitGraph:
    """Directed cycle of domains; ``edges`` lists (v, mu(v), reset kind)."""

    vertices: tuple[DomainSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        ids = [d.id for d in self.vertices]
        if not ids:
            raise ValueError("gait graph needs at least one vertex")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate domain ids")

    @classmethod
    def cycle(cls, n: int) -> "GaitGraph":
        return cls(tuple(DomainSpec(i + 1, ContactSet()) for i in range(n)))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(d.id for d in self.vertices)

    @property
    def edges(self) -> tuple[tuple[int, int, str], ...]:
        return tuple((d.id, self.next_domain(d.id), d.reset) for d in self.vertices)

    def spec(self, v: int) -> DomainSpec:
        for d in self.vertices:
            if d.id == v:
                return d
        raise KeyError(f"unknown domain {v}")

    def next_domain(self, v: int) -> int:
        ids = self.ids
        return ids[(ids.index(v) + 1) % len(ids)]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(a, b) for a, b, _ in self.edges}


def next_domain(G: GaitGraph, v: int) -> int:
    return G.next_domain(v)


@dataclass(frozen=True)
class ProductGraph:
    vertices: tuple[tuple[int, int], ...]
    edges: tuple[tuple[tuple[int, int], tuple[int, int], int], ...]   # (src, dst, condition)

    def successors(self, vw) -> list[tuple[tuple[int, int], int]]:
        return [(b, c) for a, b, c in self.edges if a == vw]


def classify_edge(G: GaitGraph, src, dst) -> int | None:
    """Strong-product condition (1, 2 or 3) for src -> dst, or None if not an edge.

    1: first stays, second follows an edge; 2: first follows, second stays;
    3: both follow edges.
    """
    E = G.edge_set()
    (v, w), (v2, w2) = src, dst
    if v == v2 and (w, w2) in E:
        return 1
    if (v, v2) in E and w == w2:
        return 2
    if (v, v2) in E and (w, w2) in E:
        return 3
    return None


def strong_product(G: GaitGraph) -> ProductGraph:
    ids = sorted(G.ids)
    V = tuple((v, w) for v in ids for w in ids)
    succ = {v: sorted(b for a, b in G.edge_set() if a == v) for v in ids}
    edges = []
    for v, w in V:
        out = []
        for w2 in succ[w]:
            out.append(((v, w2), 1))
        for v2 in succ[v]:
            out.append(((v2, w), 2))
        for v2 in succ[v]:
            for w2 in succ[w]:
                out.append(((v2, w2), 3))
        # a self-loop can produce the same pair under several conditions
        seen = {}
        for dst, cond in out:
            seen.setdefault(dst, cond)
        for dst in sorted(seen):
            edges.append(((v, w), dst, seen[dst]))
    return ProductGraph(V, tuple(edges))


# ---------------------------------------------------------------- executor

@dataclass(frozen=True)
class ExecutorConfig:
    dt: float = 1e-3
    event_tol: float = 1e-10       # root-finding time tolerance and merge window
    zeno_window: float = 1e-8
    record: bool = True
    baumgarte: Baumgarte | None = None
    mu: float = 0.6


@dataclass(frozen=True)
class Mode:
    domains: tuple[int, ...]
    t_entry: tuple[float, ...]


@dataclass
class Event:
    t: float
    src: tuple[int, ...]
    dst: tuple[int, ...]
    kind: str
    condition: int | None = None
    impulse: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"t": self.t, "from": list(self.src), "to": list(self.dst),
                "kind": self.kind, "condition": self.condition,
                "impulse": [float(f"{c:.12g}") for c in self.impulse]}


class HybridError(RuntimeError):
    pass


class ZenoError(HybridError):
    pass


@dataclass
class TrajectoryLog:
    n_agents: int
    nq: int
    nu: int
    t: list = field(default_factory=list)
    domains: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    flag: list = field(default_factory=list)
    events: list = field(default_factory=list)
    status: str = "running"
    message: str = ""
    final_state: np.ndarray | None = None
    final_mode: Mode | None = None
    meta: dict = field(default_factory=dict)

    def add(self, t, mode, x, u, lam, flag=0):
        self.t.append(t)
        self.domains.append(mode.domains)
        self.x.append(np.array(x))
        self.u.append(np.array(u))
        self.lam.append(np.array(lam))
        self.flag.append(flag)

    def arrays(self):
        return (np.array(self.t), np.array(self.domains), np.array(self.x))

    def columns(self) -> list[str]:
        cols = ["t"]
        for a in range(self.n_agents):
            cols.append(f"domain{a + 1}")
        for a in range(self.n_agents):
            cols += [f"q{a + 1}_{i}" for i in range(self.nq)]
            cols += [f"v{a + 1}_{i}" for i in range(self.nq)]
        cols += [f"u{a + 1}_{i}" for a in range(self.n_agents) for i in range(self.nu)]
        nl = max((len(r) for r in self.lam), default=0)
        cols += [f"lam_{i}" for i in range(nl)]
        cols.append("event")
        return cols

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("# coopgait trajectory log v1; columns: t, domains, per agent q then v, "
                  "u, stacked multipliers (contacts then bar), event flag\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        nl = len(cols) - len(["t"]) - self.n_agents - 2 * self.n_agents * self.nq \
            - self.n_agents * self.nu - 1
        for i in range(len(self.t)):
            lam = np.zeros(nl)
            lam[:len(self.lam[i])] = self.lam[i]
            row = [f"{self.t[i]:.10f}"] + [str(d) for d in self.domains[i]]
            row += [f"{c:.12e}" for c in self.x[i]]
            row += [f"{c:.12e}" for c in self.u[i]]
            row += [f"{c:.12e}" for c in lam]
            row.append(str(self.flag[i]))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def sidecar(self) -> dict:
        return {"format": "coopgait-events", "version": 1, "status": self.status,
                "message": self.message, "n_agents": self.n_agents,
                "events": [e.as_dict() for e in self.events], "meta": self.meta}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.sidecar(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _rk4(f, t, x, h):
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class AgentSystem:
    """One agent in a gait graph under a state-feedback controller.

    ``controller(t, x, mode) -> u``; ``durations[v]`` is the nominal time of v.
    """

    n_agents = 1

    def __init__(self, model: RobotModel, graph: GaitGraph, controller: Callable,
                 durations: dict, baumgarte: Baumgarte | None = None, anchors=None):
        self.model = model
        self.graph = graph
        self.controller = controller
        self.durations = dict(durations)
        self.baumgarte = baumgarte
        self.anchors = anchors

    def split(self, x):
        n = self.model.n
        return x[:n], x[n:]

    def accel(self, t, x, mode):
        spec = self.graph.spec(mode.domains[0])
        u = np.asarray(self.controller(t, x, mode), dtype=float)
        a, lam = constrained_fd(self.model, spec.contacts, AgentState.from_vector(x), u,
                                self.baumgarte, None)
        return a, u, lam

    def rhs(self, t, x, mode):
        a, _, _ = self.accel(t, x, mode)
        return np.concatenate([x[self.model.n:], a])

    def guard_values(self, t, x, mode) -> np.ndarray:
        v = mode.domains[0]
        return np.array([self._guard(self.model, self.graph.spec(v), t, x, mode.t_entry[0], v,
                                     lambda: self.accel(t, x, mode)[2])])

    def _guard(self, model, spec, t, x, t_entry, v, lam_fn):
        g = spec.guard
        if g.kind == "phase-complete":
            return 1.0 - (t - t_entry) / self.durations[v]
        q = x[:model.n]
        if g.kind == "swing-height":
            kin = model.evaluate(q, np.zeros(model.n), need_dyn=False)
            return kin.pos(g.point)[model.contact_dim - 1] / g.scale
        lam = lam_fn()
        r = model.contact_dim
        i = spec.contacts.ids.index(g.point)
        return lam[r * i + r - 1] / g.scale

    def reset(self, t, x, mode, switching):
        v = mode.domains[0]
        v2 = self.graph.next_domain(v)
        spec = self.graph.spec(v)
        impulse = []
        if spec.reset == IMPACT:
            n = self.model.n
            vp, dlam = impact_map(self.model, self.graph.spec(v2).contacts,
                                  AgentState.from_vector(x))
            x = np.concatenate([x[:n], vp])
            impulse = list(dlam)
        return x, Mode((v2,), (t,)), spec.reset, None, impulse

    def sample(self, t, x, mode):
        a, u, lam = self.accel(t, x, mode)
        return u, lam


class CoupledSystem:
    """Two agents joined by a bar, executing the strong product of one graph.

    ``controller(t, xa, mode) -> (u1, u2)``.
    """

    n_agents = 2

    def __init__(self, m1: RobotModel, m2: RobotModel, graph: GaitGraph, bar: BarConstraint,
                 controller: Callable, durations: dict):
        self.m1, self.m2 = m1, m2
        self.graph = graph
        self.bar = bar
        self.controller = controller
        self.durations = dict(durations)
        self._single = (AgentSystem(m1, graph, None, durations),
                        AgentSystem(m2, graph, None, durations))

    @property
    def state_dim(self) -> int:
        return 2 * (self.m1.n + self.m2.n)

    @property
    def input_dim(self) -> int:
        return self.m1.m + self.m2.m

    def aug(self, x) -> AugmentedState:
        return AugmentedState.from_vector(x)

    def accel(self, t, x, mode):
        u1, u2 = self.controller(t, x, mode)
        c1 = self.graph.spec(mode.domains[0]).contacts
        c2 = self.graph.spec(mode.domains[1]).contacts
        M, rhs0, B1, B2, (k1, k2) = coupled_terms(self.m1, self.m2, (c1, c2), self.aug(x),
                                                  self.bar)
        sol = _coupled_solve(M, rhs0 + B1 @ u1 + B2 @ u2, (c1.ids, c2.ids))
        a1, a2, l1, l2, le = _split(sol, self.m1.n, self.m2.n, k1, k2)
        return a1, a2, np.concatenate([u1, u2]), np.concatenate([l1, l2, [le]])

    def rhs(self, t, x, mode):
        n1 = self.m1.n
        n2 = self.m2.n
        a1, a2, _, _ = self.accel(t, x, mode)
        return np.concatenate([x[n1:2 * n1], a1, x[2 * n1 + n2:], a2])

    def guard_values(self, t, x, mode) -> np.ndarray:
        n1 = 2 * self.m1.n
        out = np.empty(2)
        for a, (sysa, xa) in enumerate(((self._single[0], x[:n1]), (self._single[1], x[n1:]))):
            v = mode.domains[a]

            def lam_fn(a=a):
                _, _, _, lam = self.accel(t, x, mode)
                r = sysa.model.contact_dim
                k1 = r * len(self.graph.spec(mode.domains[0]).contacts.ids)
                return lam[:k1] if a == 0 else lam[k1:-1]
            out[a] = sysa._guard(sysa.model, self.graph.spec(v), t, xa, mode.t_entry[a], v, lam_fn)
        return out

    def reset(self, t, x, mode, switching):
        v, w = mode.domains
        nv = self.graph.next_domain(v) if switching[0] else v
        nw = self.graph.next_domain(w) if switching[1] else w
        kinds = [self.graph.spec(d).reset for d, s in zip((v, w), switching) if s]
        cond = classify_edge(self.graph, (v, w), (nv, nw))
        impulse = []
        kind = IMPACT if IMPACT in kinds else IDENTITY
        if kind == IMPACT:
            c1 = self.graph.spec(nv).contacts
            c2 = self.graph.spec(nw).contacts
            v1, v2, d1, d2, de = coupled_impact(self.m1, self.m2, (c1, c2), self.aug(x), self.bar)
            n1, n2 = self.m1.n, self.m2.n
            x = np.concatenate([x[:n1], v1, x[2 * n1:2 * n1 + n2], v2])
            impulse = list(d1) + list(d2) + [de]
        te = tuple(t if s else te for s, te in zip(switching, mode.t_entry))
        return x, Mode((nv, nw), te), kind, cond, impulse

    def sample(self, t, x, mode):
        _, _, u, lam = self.accel(t, x, mode)
        return u, lam


def step_hybrid(cfg: ExecutorConfig, system, x0, mode: Mode, t0: float, t_max: float,
                stop: Callable[[Event, Mode], bool] | None = None) -> TrajectoryLog:
    """Integrate until ``stop(event, new_mode)`` returns True or t_max is reached."""
    x = np.array(x0, dtype=float)
    t = float(t0)
    h = cfg.dt
    nq = system.model.n if system.n_agents == 1 else system.m1.n
    nu = system.model.m if system.n_agents == 1 else system.m1.m
    out = TrajectoryLog(system.n_agents, nq, nu)
    out.meta = {"dt": h, "t0": t0, "t_max": t_max, "event_tol": cfg.event_tol}
    f = None
    last_events: list[float] = []
    zeno_hits = 0

    def record(t, x, mode, flag):
        if cfg.record:
            u, lam = system.sample(t, x, mode)
            out.add(t, mode, x, u, lam, flag)

    try:
        record(t, x, mode, 0)
        g_prev = system.guard_values(t, x, mode)
        while t < t_max - 1e-12:
            hs = min(h, t_max - t)
            cur = mode
            f = lambda tt, xx: system.rhs(tt, xx, cur)
            x_new = _rk4(f, t, x, hs)
            if not np.all(np.isfinite(x_new)):
                raise HybridError("state left admissibility (non-finite)")
            g_new = system.guard_values(t + hs, x_new, mode)
            crossed = [a for a in range(len(g_new)) if g_prev[a] > 0 and g_new[a] <= 0]
            if not crossed:
                t, x, g_prev = t + hs, x_new, g_new
                record(t, x, mode, 0)
                continue
            # localize each crossing on the RK4 partial step
            roots = {}
            for a in crossed:
                def ga(s, a=a):
                    return system.guard_values(t + s, _rk4(f, t, x, s), mode)[a]
                roots[a] = brentq(ga, 0.0, hs, xtol=cfg.event_tol * 1e-3, rtol=4 * np.finfo(float).eps,
                                  maxiter=200)
            s_star = min(roots.values())
            first = min(a for a in roots if roots[a] == s_star)
            switching = [False] * len(g_new)
            switching[first] = True
            # merge events within the tolerance window, including ones just past the step
            x_probe = _rk4(f, t, x, s_star + cfg.event_tol)
            g_probe = system.guard_values(t + s_star + cfg.event_tol, x_probe, mode)
            for a in range(len(g_new)):
                if a != first and g_prev[a] > 0 and (
                        (a in roots and roots[a] - s_star <= cfg.event_tol) or g_probe[a] <= 0):
                    switching[a] = True
            t_ev = t + s_star
            x_ev = _rk4(f, t, x, s_star)
            record(t_ev, x_ev, mode, 1)
            src = mode.domains
            x, mode, kind, cond, impulse = system.reset(t_ev, x_ev, mode, tuple(switching))
            ev = Event(t_ev, src, mode.domains, kind, cond, impulse)
            out.events.append(ev)
            t = t_ev
            record(t, x, mode, 2)
            log.debug("event t=%.10f %s -> %s (%s)", t, src, mode.domains, kind)
            if last_events and t - last_events[-1] < cfg.zeno_window:
                zeno_hits += 1
                if zeno_hits >= 2:
                    raise ZenoError(f"Zeno behaviour near t={t:.10f}")
            else:
                zeno_hits = 0
            last_events.append(t)
            g_prev = system.guard_values(t, x, mode)
            if stop is not None and stop(ev, mode):
                out.status = "stopped"
                break
        else:
            if stop is None:
                out.status = "completed"
            else:
                out.status = "timeout"
                out.message = f"stop condition not met by t_max={t_max}"
    except ZenoError as exc:
        out.status = "zeno"
        out.message = str(exc)
    except (HybridError, np.linalg.LinAlgError, ValueError) as exc:
        out.status = "inadmissible"
        out.message = str(exc)
    out.final_state = x
    out.final_mode = mode
    return out
