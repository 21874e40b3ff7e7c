import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopgait.control import ControllerParams
from coopgait.qp import QpInfeasible, QpProblem, build_controller_qp, solve_qp

from oracles import enumerate_qp


def random_qp(rng, n=None, m=None):
    n = int(rng.integers(2, 9)) if n is None else n
    m = int(rng.integers(0, min(3, n - 1) + 1)) if m is None else m
    L = rng.normal(size=(n, n))
    Q = L @ L.T + 0.1 * np.eye(n)
    c = 3 * rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = A @ rng.uniform(-1, 1, n)       # feasible by construction
    return QpProblem(Q, c, A, b, -np.ones(n), np.ones(n))


def test_hundred_random_instances_against_enumeration():
    rng = np.random.default_rng(7)
    problems = [random_qp(rng) for _ in range(100)]
    t0 = time.perf_counter()
    results = [solve_qp(p) for p in problems]
    elapsed = time.perf_counter() - t0
    for p, r in zip(problems, results):
        k = r.kkt
        assert max(k["stationarity"], k["primal"], k["complementarity"], k["dual_sign"]) < 1e-9
        f_ref, _ = enumerate_qp(p.Q, p.c, p.A_eq, p.b_eq, p.lo, p.hi)
        assert k["objective"] - f_ref < 1e-9
    assert elapsed < 5.0


def test_unconstrained_minimum_inside_box():
    Q = np.diag([2.0, 4.0])
    p = QpProblem(Q, np.array([-1.0, 1.0]), np.zeros((0, 2)), np.zeros(0), -10, 10)
    r = solve_qp(p)
    assert np.allclose(r.x, [0.5, -0.25])
    assert r.active == ()


def test_bound_becomes_active():
    p = QpProblem(np.eye(1), np.array([-5.0]), np.zeros((0, 1)), np.zeros(0), -1, 1)
    r = solve_qp(p)
    assert r.x[0] == 1.0 and r.active == ((0, 1),)
    assert r.z[0] < 0


def test_warm_start_gives_same_answer():
    rng = np.random.default_rng(3)
    p = random_qp(rng, n=6, m=2)
    cold = solve_qp(p)
    warm = solve_qp(p, warm_active=cold.active)
    assert np.allclose(cold.x, warm.x, atol=1e-12)


def test_infeasible_reports_violation():
    A = np.array([[1.0, 1.0]])
    p = QpProblem(np.eye(2), np.zeros(2), A, np.array([5.0]), -1, 1)
    with pytest.raises(QpInfeasible) as err:
        solve_qp(p)
    assert err.value.violation == pytest.approx(3.0, abs=1e-6)


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), np.zeros((0, 2)), [], -1, 1)
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), np.zeros((0, 2)), [], 1, -1)


def test_controller_qp_recovers_nominal_when_consistent():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    u_nom = rng.normal(size=4)
    b = rng.normal(size=3)
    e = -A @ u_nom - b                      # u_nom already satisfies the output dynamics
    prob = build_controller_qp(u_nom, A, b, e, ControllerParams())
    r = solve_qp(prob)
    assert np.max(np.abs(r.x[:4] - u_nom)) < 1e-10
    assert np.max(np.abs(r.x[4:])) < 1e-10


@given(st.integers(min_value=0, max_value=10_000))
def test_random_instances_satisfy_kkt(seed):
    p = random_qp(np.random.default_rng(seed))
    k = solve_qp(p).kkt
    assert max(k["stationarity"], k["primal"], k["complementarity"], k["dual_sign"]) < 1e-9
