"""Poincaré return maps, stability modulo d, and trajectory audits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BarConstraint, ContactSet, coupled_impact, kinetic_energy, potential_energy
from .hybrid import AgentSystem, CoupledSystem, ExecutorConfig, Mode, TrajectoryLog, step_hybrid
from .model import AgentState, AugmentedState, RobotModel

log = logging.getLogger(__name__)

FD_STEP = 1e-6


class ReturnMapError(RuntimeError):
    def __init__(self, message, sequence=None):
        super().__init__(message)
        self.sequence = sequence or []


@dataclass(frozen=True)
class Section:
    """Entry into ``domains`` (one id per agent)."""

    domains: tuple[int, ...]


def quotient_indices(model: RobotModel, n_agents: int) -> list[int]:
    """Positions of the horizontal base coordinates in the stacked state."""
    idx = []
    for a in range(n_agents):
        off = 2 * model.n * a
        idx += [off + h for h in model.horizontal_indices]
    return idx


def poincare_map(system, x0, section: Section, cfg: ExecutorConfig = ExecutorConfig(record=False),
                 t_max: float | None = None, period_hint: float = 1.0):
    """One return to the section; returns (x1, log)."""
    mode = Mode(section.domains, tuple(0.0 for _ in section.domains))
    t_max = 3.0 * period_hint if t_max is None else t_max
    seen = []

    def stop(ev, m):
        seen.append(m.domains)
        return m.domains == section.domains

    out = step_hybrid(cfg, system, x0, mode, 0.0, t_max, stop=stop)
    if out.status != "stopped":
        raise ReturnMapError(f"return map failed: {out.status} {out.message}",
                             [list(s) for s in seen])
    return out.final_state, out


def _reduced(x, removed):
    keep = np.setdiff1d(np.arange(x.size), removed)
    return x[keep], keep


@dataclass
class PoincareResult:
    fixed_point: np.ndarray
    jacobian: np.ndarray
    moduli: np.ndarray
    spectral_radius: float
    section: tuple
    removed: list
    residual: float
    steps: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        doc = {"format": "coopgait-stability", "version": 1,
               "spectral_radius": float(self.spectral_radius),
               "eigen_moduli": [float(f"{m:.12g}") for m in self.moduli],
               "section": {"entry_domains": list(self.section), "removed_coordinates": self.removed},
               "fixed_point_residual": float(self.residual),
               "perturbation_sizes": [float(f"{s:.6g}") for s in self.steps],
               "meta": self.meta}
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def stability_report(system, x_star, section: Section, removed, cfg=ExecutorConfig(record=False),
                     period_hint: float = 1.0, fd_step: float = FD_STEP,
                     residual_tol: float = 1e-6, project=None,
                     basis: str = "coordinate") -> PoincareResult:
    """Central-difference Jacobian of the quotiented return map at x_star.

    ``project`` (optional) maps a perturbed state back onto the constraint
    manifold of the section domain before the flow.

    ``basis='tangent'`` (needs ``project``) differences only along an
    orthonormal basis of the range of the projector's derivative.  Returns
    land on the manifold, so the full Jacobian is DF DP and its nonzero
    eigenvalues are those of DF restricted to the tangent space: same moduli,
    fewer returns.  ``jacobian`` is then the k x k restricted map.
    """
    x_star = np.asarray(x_star, dtype=float)
    x1, _ = poincare_map(system, x_star, section, cfg, period_hint=period_hint)
    z_star, keep = _reduced(x_star, removed)
    res = float(np.max(np.abs(x1[keep] - z_star)))
    if res > residual_tol:
        raise ReturnMapError(f"fixed-point residual {res:.3e} exceeds {residual_tol:.1e}")
    if basis == "coordinate":
        U = np.eye(keep.size)
        steps = fd_step * np.maximum(1.0, np.abs(z_star))
    elif basis == "tangent":
        if project is None:
            raise ValueError("basis='tangent' needs a projector")
        U = tangent_basis(project, x_star, keep)
        steps = np.full(U.shape[1], fd_step * max(1.0, float(np.max(np.abs(z_star)))))
    else:
        raise ValueError(f"unknown basis {basis!r}")
    k = U.shape[1]
    cols = np.zeros((keep.size, k))
    for c in range(k):
        ys = []
        for sgn in (1.0, -1.0):
            x = x_star.copy()
            x[keep] += sgn * steps[c] * U[:, c]
            if project is not None:
                x = project(x)
            y, _ = poincare_map(system, x, section, cfg, period_hint=period_hint)
            ys.append(y[keep])
        cols[:, c] = (ys[0] - ys[1]) / (2 * steps[c])
    J = cols if basis == "coordinate" else U.T @ cols
    moduli = np.sort(np.abs(np.linalg.eigvals(J)))[::-1]
    meta = {"basis": basis, "columns": int(k)}
    return PoincareResult(x_star, J, moduli, float(moduli[0]), section.domains,
                          [int(r) for r in removed], res, steps, meta)


def tangent_basis(project, x_star, keep, h: float = 1e-6, tol: float = 1e-3) -> np.ndarray:
    """Orthonormal basis (in the kept coordinates) of the range of the
    projector's derivative at x_star, by central differences."""
    x_star = np.asarray(x_star, dtype=float)
    DP = np.zeros((keep.size, keep.size))
    for c, i in enumerate(keep):
        xp = x_star.copy()
        xm = x_star.copy()
        xp[i] += h
        xm[i] -= h
        DP[:, c] = (project(xp)[keep] - project(xm)[keep]) / (2 * h)
    U, sv, _ = np.linalg.svd(DP)
    return U[:, sv > tol * sv[0]]


def constraint_projector(m1: RobotModel, m2: RobotModel, contacts: tuple[ContactSet, ContactSet],
                         bar: BarConstraint):
    """Map a perturbed two-agent state back onto the section's constraint set.

    Positions: agent 2 is slid along the first horizontal axis until the bar
    has its nominal length (that coordinate is quotiented out anyway).
    Velocities: projected onto the contact and bar constraints with the
    plastic impact map, i.e. the kinetic-metric orthogonal projection.
    Without this a perturbation of the bar length would show up as a
    spurious unit eigenvalue.
    """
    n1, n2 = m1.n, m2.n
    k2 = 2 * n1 + m2.horizontal_indices[0]
    off = np.asarray(bar.offset2, dtype=float)

    def project(x):
        x = np.array(x, dtype=float)
        xa = AugmentedState.from_vector(x)
        p1 = m1.evaluate(xa.agent1.q, xa.agent1.v, need_dyn=False).pos("end_effector")
        p2 = m2.evaluate(xa.agent2.q, xa.agent2.v, need_dyn=False).pos("end_effector")
        dp = p1 - p2 - off
        r2 = bar.length ** 2 - dp[1] ** 2 - dp[2] ** 2
        if r2 <= 0:
            raise ValueError("bar length cannot be restored along the horizontal axis")
        x[k2] += dp[0] - np.copysign(np.sqrt(r2), dp[0])
        v1, v2, *_ = coupled_impact(m1, m2, contacts, AugmentedState.from_vector(x), bar)
        x[n1:2 * n1] = v1
        x[2 * n1 + n2:] = v2
        return x

    return project


def leading_moduli(system, x_star, section: Section, removed, k: int = 10,
                   cfg=ExecutorConfig(record=False), period_hint: float = 1.0,
                   fd_step: float = 1e-5, project=None, seed: int = 0) -> np.ndarray:
    """Ritz estimates of the largest eigenvalue moduli of the quotiented
    return-map Jacobian from k Arnoldi steps (one return per step).

    Much cheaper than the full Jacobian and good enough to screen parameters;
    uses one-sided differences.
    """
    x_star = np.asarray(x_star, dtype=float)
    x1, _ = poincare_map(system, x_star, section, cfg, period_hint=period_hint)
    _, keep = _reduced(x_star, removed)
    rng = np.random.default_rng(seed)
    Q = np.zeros((keep.size, k + 1))
    H = np.zeros((k + 1, k))
    q0 = rng.standard_normal(keep.size)
    Q[:, 0] = q0 / np.linalg.norm(q0)
    done = k
    for j in range(k):
        x = x_star.copy()
        x[keep] += fd_step * Q[:, j]
        if project is not None:
            x = project(x)
        y, _ = poincare_map(system, x, section, cfg, period_hint=period_hint)
        w = (y[keep] - x1[keep]) / fd_step
        for i in range(j + 1):
            H[i, j] = Q[:, i] @ w
            w = w - H[i, j] * Q[:, i]
        H[j + 1, j] = np.linalg.norm(w)
        if H[j + 1, j] < 1e-12:
            done = j + 1
            break
        Q[:, j + 1] = w / H[j + 1, j]
    return np.sort(np.abs(np.linalg.eigvals(H[:done, :done])))[::-1]


# ------------------------------------------------------------------ audits

def audits(log_: TrajectoryLog, model: RobotModel, bar: BarConstraint | None = None,
           graph=None, output_fn=None, mu: float = 0.6) -> dict:
    """Constraint drift, energy bookkeeping, contact-force flags and output norms."""
    t = np.array(log_.t)
    X = np.array(log_.x)
    n = model.n
    report: dict = {"samples": int(t.size), "status": log_.status}
    if t.size == 0:
        return report
    agents = log_.n_agents
    # bar length drift
    if bar is not None and agents == 2:
        drift = 0.0
        for x in X:
            kin1 = model.evaluate(x[:n], x[n:2 * n], need_dyn=False)
            kin2 = model.evaluate(x[2 * n:3 * n], x[3 * n:], need_dyn=False)
            drift = max(drift, abs(bar.residual(kin1.pos("end_effector"), kin2.pos("end_effector"))))
        report["bar_drift"] = drift
    # contact drift: stance points must not move between events
    if graph is not None:
        cdrift = 0.0
        doms = log_.domains
        for a in range(agents):
            off = 2 * n * a
            anchor = None
            prev = None
            for i, x in enumerate(X):
                dom = doms[i][a]
                ids = graph.spec(dom).contacts.ids
                kin = model.evaluate(x[off:off + n], x[off + n:off + 2 * n], need_dyn=False)
                pos = {c: kin.pos(c) for c in ids}
                if dom != prev or log_.flag[i] != 0:
                    anchor = pos
                    prev = dom
                    continue
                for c in ids:
                    if c in anchor:
                        cdrift = max(cdrift, float(np.max(np.abs(pos[c] - anchor[c]))))
        report["contact_drift"] = cdrift
    # energy balance: E(t) - E(0) - int v'Bu dt over impact-free stretches
    U = np.array(log_.u)
    worst = 0.0
    for a in range(agents):
        off = 2 * n * a
        E = np.array([kinetic_energy(model, x[off:off + n], x[off + n:off + 2 * n])
                      + potential_energy(model, x[off:off + n]) for x in X])
        P = np.array([x[off + n:off + 2 * n] @ model.B @ U[i][a * model.m:(a + 1) * model.m]
                      for i, x in enumerate(X)])
        seg = _segments(log_.flag)
        for s0, s1 in seg:
            if s1 - s0 < 2:
                continue
            work = np.concatenate([[0.0], np.cumsum(0.5 * (P[s0 + 1:s1] + P[s0:s1 - 1])
                                                    * np.diff(t[s0:s1]))])
            if agents == 1:
                worst = max(worst, float(np.max(np.abs(E[s0:s1] - E[s0] - work))))
        report.setdefault("energy_residual", worst if agents == 1 else None)
    # contact force admissibility (monitor only)
    flags = 0
    if graph is not None and agents == 1:
        r = model.contact_dim
        for i, lam in enumerate(log_.lam):
            ids = graph.spec(log_.domains[i][0]).contacts.ids
            for c in range(len(ids)):
                f = lam[r * c:r * (c + 1)]
                if len(f) == r and (f[-1] < 0 or np.linalg.norm(f[:-1]) > mu * f[-1] + 1e-12):
                    flags += 1
        report["contact_force_flags"] = flags
    if bar is not None and agents == 2:
        report["max_abs_bar_multiplier"] = float(max(abs(lam[-1]) for lam in log_.lam))
    if output_fn is not None:
        norms = [float(np.linalg.norm(np.concatenate([np.atleast_1d(c) for c in output_fn(i)])))
                 for i in range(t.size)]
        report["max_output_norm"] = max(norms)
        report["output_norms_tail"] = norms[-1]
    return report


def _segments(flags):
    """Index ranges [s0, s1) between events (flag 1 ends a segment, flag 2 starts one)."""
    segs = []
    start = 0
    for i, f in enumerate(flags):
        if f == 1:
            segs.append((start, i + 1))
        elif f == 2:
            start = i
    segs.append((start, len(flags)))
    return segs
