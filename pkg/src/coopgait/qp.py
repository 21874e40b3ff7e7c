"""Dense convex QP with equality rows and box bounds.

    minimize    1/2 x'Qx + c'x
    subject to  A_eq x = b_eq,   lo <= x <= hi

Primal active-set method on the bound constraints.  A feasible starting point
comes from bounded-variable least squares (scipy's BVLS), which also yields the
minimal-violation certificate when the problem is infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import lsq_linear

FEAS_TOL = 1e-9
STEP_TOL = 1e-13


class QpInfeasible(ValueError):
    def __init__(self, message, violation: float, x_closest=None):
        super().__init__(message)
        self.violation = violation
        self.x_closest = x_closest


class QpMaxIter(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class QpProblem:
    Q: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        n = len(self.c)
        Q = np.asarray(self.Q, dtype=float)
        A = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if Q.shape != (n, n):
            raise ValueError("Q must be n x n")
        if not (np.array_equal(Q, Q.T) or np.allclose(Q, Q.T, atol=1e-12)):
            raise ValueError("Q must be symmetric")
        if np.any(lo > hi):
            raise ValueError("lo must not exceed hi")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "A_eq", A)
        object.__setattr__(self, "b_eq", np.asarray(self.b_eq, dtype=float).reshape(A.shape[0]))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.Q @ x + self.c @ x)


@dataclass(frozen=True, eq=False)
class QpResult:
    x: np.ndarray
    y: np.ndarray            # equality multipliers: Qx + c = A'y + z
    z: np.ndarray            # bound multipliers (>= 0 at lower, <= 0 at upper)
    active: tuple            # ((index, -1 | +1), ...)
    iterations: int
    problem: QpProblem | None = None

    @cached_property
    def kkt(self) -> dict:
        """KKT residuals, computed on first access."""
        return {} if self.problem is None else kkt_residuals(self.problem, self.x, self.y, self.z)

    @property
    def objective_value(self) -> float:
        return self.kkt.get("objective", float("nan"))


def kkt_residuals(p: QpProblem, x, y, z) -> dict:
    grad = p.Q @ x + p.c
    stat = grad - p.A_eq.T @ y - z
    prim = max(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0),
               np.max(np.maximum(p.lo - x, 0.0), initial=0.0),
               np.max(np.maximum(x - p.hi, 0.0), initial=0.0))
    comp = 0.0
    sign = 0.0
    for i in range(p.n):
        zl = max(z[i], 0.0)
        zu = max(-z[i], 0.0)
        if np.isfinite(p.lo[i]):
            comp = max(comp, abs(zl * (x[i] - p.lo[i])))
        else:
            sign = max(sign, zl)
        if np.isfinite(p.hi[i]):
            comp = max(comp, abs(zu * (p.hi[i] - x[i])))
        else:
            sign = max(sign, zu)
    return {"stationarity": float(np.max(np.abs(stat), initial=0.0)),
            "primal": float(prim), "complementarity": float(comp),
            "dual_sign": float(sign), "objective": p.objective(x)}


def _eqp(p: QpProblem, x, fixed: np.ndarray):
    """Step minimizing the model with fixed variables held and the equality
    residual at x removed; returns (step, y)."""
    free = ~fixed
    nf = int(free.sum())
    A_f = p.A_eq[:, free]
    m = A_f.shape[0]
    g = (p.Q @ x + p.c)[free]
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = p.Q[np.ix_(free, free)]
    K[:nf, nf:] = -A_f.T
    K[nf:, :nf] = A_f
    rhs = np.concatenate([-g, p.b_eq - p.A_eq @ x])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    step = np.zeros(p.n)
    step[free] = sol[:nf]
    return step, sol[nf:]


def _multipliers(p: QpProblem, x, fixed):
    """Equality and bound multipliers at x for working set ``fixed``."""
    grad = p.Q @ x + p.c
    free = ~fixed
    A_f = p.A_eq[:, free]
    if A_f.shape[0]:
        y = np.linalg.lstsq(A_f.T, grad[free], rcond=None)[0]
    else:
        y = np.zeros(0)
    z = np.zeros(p.n)
    z[fixed] = (grad - p.A_eq.T @ y)[fixed]
    return y, z


def _feasible_start(p: QpProblem):
    if p.A_eq.shape[0] == 0:
        return np.clip(np.zeros(p.n), p.lo, p.hi)
    res = lsq_linear(p.A_eq, p.b_eq, bounds=(p.lo, p.hi), method="bvls",
                     tol=1e-14, lsmr_tol=None)
    x = np.clip(res.x, p.lo, p.hi)
    viol = float(np.max(np.abs(p.A_eq @ x - p.b_eq)))
    if viol > FEAS_TOL * max(1.0, np.max(np.abs(p.b_eq))):
        raise QpInfeasible(f"infeasible: minimal equality violation {viol:.3e} within bounds",
                           viol, x)
    return x


def solve_qp(p: QpProblem, warm_active=None, max_iter: int | None = None) -> QpResult:
    """Primal active-set solve; ``warm_active`` is a previous result's ``active``."""
    n = p.n
    max_iter = 10 * n if max_iter is None else max_iter
    side = np.zeros(n, dtype=int)   # -1 lower, +1 upper, 0 free

    # fast path: try the warm working set (or none) directly
    candidates = [()] if not warm_active else [tuple(warm_active), ()]
    for cand in candidates:
        side[:] = 0
        x = np.zeros(n)
        for i, s in cand:
            side[i] = s
            x[i] = p.lo[i] if s < 0 else p.hi[i]
        fixed = side != 0
        step, y = _eqp(p, x, fixed)
        xt = x + step
        if np.all(xt >= p.lo - FEAS_TOL) and np.all(xt <= p.hi + FEAS_TOL) and \
                np.max(np.abs(p.A_eq @ xt - p.b_eq), initial=0.0) <= FEAS_TOL * max(1.0, np.max(np.abs(p.b_eq), initial=0.0)):
            xt = np.clip(xt, p.lo, p.hi)
            z = np.zeros(n)
            z[fixed] = (p.Q @ xt + p.c - p.A_eq.T @ y)[fixed]
            if np.all(z[side < 0] >= -1e-12) and np.all(z[side > 0] <= 1e-12):
                return _result(p, xt, y, z, side, 0)

    x = _feasible_start(p)
    side[:] = 0
    # start with bounds active at the start point, keeping equality rows solvable
    for i in range(n):
        if p.lo[i] == p.hi[i] or (np.isfinite(p.lo[i]) and x[i] <= p.lo[i]):
            side[i] = -1
        elif np.isfinite(p.hi[i]) and x[i] >= p.hi[i]:
            side[i] = 1
    for it in range(1, max_iter + 1):
        fixed = side != 0
        step, _ = _eqp(p, x, fixed)
        if np.max(np.abs(step)) <= STEP_TOL * max(1.0, np.max(np.abs(x))):
            y, z = _multipliers(p, x, fixed)
            # wrong-sign multipliers: release the worst, lowest index on ties
            viol = np.where(side < 0, -z, np.where(side > 0, z, 0.0))
            viol[p.lo == p.hi] = 0.0
            worst = float(viol.max(initial=0.0))
            if worst <= 1e-12 * max(1.0, np.max(np.abs(z), initial=0.0)):
                return _result(p, x, y, z, side, it)
            j = int(np.flatnonzero(viol >= worst)[0])
            side[j] = 0
            continue
        alpha = 1.0
        block = -1
        for i in range(n):
            if side[i] != 0:
                continue
            if step[i] < -STEP_TOL and np.isfinite(p.lo[i]):
                a = (p.lo[i] - x[i]) / step[i]
                if a < alpha - 1e-15:
                    alpha, block = a, i
            elif step[i] > STEP_TOL and np.isfinite(p.hi[i]):
                a = (p.hi[i] - x[i]) / step[i]
                if a < alpha - 1e-15:
                    alpha, block = a, i
        alpha = max(alpha, 0.0)
        x = x + alpha * step
        if block >= 0:
            side[block] = -1 if step[block] < 0 else 1
            x[block] = p.lo[block] if side[block] < 0 else p.hi[block]
        x = np.clip(x, p.lo, p.hi)
    raise QpMaxIter(f"active-set iteration limit {max_iter} exceeded")


def _result(p, x, y, z, side, it) -> QpResult:
    active = tuple((int(i), int(side[i])) for i in np.flatnonzero(side))
    return QpResult(x=x, y=y, z=z, active=active, iterations=it, problem=p)


# ------------------------------------------------------------ controller QP

def build_controller_qp(u_nom, A, b, e, params) -> QpProblem:
    """Decision (u, delta): min 1/2|u - u_nom|^2 + w/2 |delta|^2, A u + b + delta = -e."""
    u_nom = np.asarray(u_nom, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m = u_nom.size
    r = A.shape[0]
    w = float(params.qp_weight)
    Q = np.diag(np.concatenate([np.ones(m), np.full(r, w)]))
    c = np.concatenate([-u_nom, np.zeros(r)])
    A_eq = np.hstack([A, np.eye(r)])
    b_eq = -np.asarray(e, dtype=float) - np.asarray(b, dtype=float)
    lo = np.concatenate([np.broadcast_to(params.u_min, (m,)), np.full(r, params.delta_min)])
    hi = np.concatenate([np.broadcast_to(params.u_max, (m,)), np.full(r, params.delta_max)])
    return QpProblem(Q, c, A_eq, b_eq, lo, hi)
