import json
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.linalg import expm

from coopgait import fixtures
from coopgait.analysis import (PoincareResult, ReturnMapError, Section, audits, leading_moduli,
                               poincare_map, quotient_indices, stability_report)
from coopgait.control import NominalController
from coopgait.hybrid import AgentSystem, ExecutorConfig, Mode, step_hybrid
from coopgait.model import AugmentedState


class LinearToy:
    """x' = A x in a single domain of length T; the return map is expm(A T)."""

    n_agents = 1

    def __init__(self, A, T=1.0):
        self.A = np.asarray(A, dtype=float)
        self.T = T
        self.model = SimpleNamespace(n=self.A.shape[0] // 2, m=0)

    def rhs(self, t, x, mode):
        return self.A @ x

    def guard_values(self, t, x, mode):
        return np.array([1.0 - (t - mode.t_entry[0]) / self.T])

    def reset(self, t, x, mode, switching):
        return x, Mode((1,), (t,)), "identity", None, []

    def sample(self, t, x, mode):
        return np.zeros(0), np.zeros(0)


A_TOY = np.array([[-0.3, 1.0, 0.0, 0.0],
                  [-1.0, -0.3, 0.0, 0.0],
                  [0.0, 0.0, 0.1, 0.5],
                  [0.0, 0.0, 0.0, -2.0]])


def test_return_map_of_linear_toy():
    toy = LinearToy(A_TOY)
    x0 = np.array([1.0, 0.0, 0.5, -0.2])
    x1, _ = poincare_map(toy, x0, Section((1,)), ExecutorConfig(dt=1e-3, record=False))
    assert np.allclose(x1, expm(A_TOY) @ x0, atol=1e-10)


def test_stability_report_recovers_exact_moduli():
    toy = LinearToy(A_TOY)
    res = stability_report(toy, np.zeros(4), Section((1,)), [],
                           ExecutorConfig(dt=1e-3, record=False))
    ref = np.sort(np.abs(np.linalg.eigvals(expm(A_TOY))))[::-1]
    assert np.allclose(res.moduli, ref, atol=1e-8)
    assert res.spectral_radius == pytest.approx(np.exp(0.1), abs=1e-8)
    doc = json.loads(res.to_json())
    assert doc["spectral_radius"] == pytest.approx(res.spectral_radius)
    assert len(doc["perturbation_sizes"]) == 4


def test_removed_coordinates_are_quotiented():
    toy = LinearToy(A_TOY)
    res = stability_report(toy, np.zeros(4), Section((1,)), [2],
                           ExecutorConfig(dt=1e-3, record=False))
    assert res.jacobian.shape == (3, 3)
    assert res.removed == [2]


def test_tangent_basis_gives_the_same_nonzero_moduli():
    # {x4 = 0} is invariant, so projecting onto it leaves the upper block's spectrum
    toy = LinearToy(A_TOY)
    project = lambda x: np.concatenate([x[:3], [0.0]])
    cfg = ExecutorConfig(dt=1e-3, record=False)
    full = stability_report(toy, np.zeros(4), Section((1,)), [], cfg, project=project)
    tan = stability_report(toy, np.zeros(4), Section((1,)), [], cfg, project=project,
                           basis="tangent")
    ref = np.sort(np.abs(np.linalg.eigvals(expm(A_TOY[:3, :3]))))[::-1]
    assert tan.jacobian.shape == (3, 3) and tan.meta["columns"] == 3
    assert np.allclose(tan.moduli, ref, atol=1e-8)
    assert np.allclose(full.moduli[:3], ref, atol=1e-8) and full.moduli[3] < 1e-8
    with pytest.raises(ValueError):
        stability_report(toy, np.zeros(4), Section((1,)), [], cfg, basis="tangent")


def test_arnoldi_estimate_matches_full_spectrum():
    toy = LinearToy(A_TOY)
    est = leading_moduli(toy, np.zeros(4), Section((1,)), [], k=4,
                         cfg=ExecutorConfig(dt=1e-3, record=False))
    ref = np.sort(np.abs(np.linalg.eigvals(expm(A_TOY))))[::-1]
    assert np.allclose(est, ref, atol=1e-6)


def test_residual_check_and_failed_return():
    toy = LinearToy(A_TOY)
    with pytest.raises(ReturnMapError, match="residual"):
        stability_report(toy, np.ones(4), Section((1,)), [], ExecutorConfig(dt=1e-3, record=False))
    with pytest.raises(ReturnMapError):
        poincare_map(toy, np.ones(4), Section((1,)), ExecutorConfig(dt=1e-3, record=False),
                     t_max=0.5)


def test_quotient_indices(walker):
    assert quotient_indices(walker, 1) == [0]
    assert quotient_indices(walker, 2) == [0, 14]


def test_projector_lands_on_constraints(walker, gait, rng):
    sc = fixtures.coupled_scenario(gait)
    x = sc.x_star + 1e-3 * rng.normal(size=28)
    y = sc.project(x)
    xa = AugmentedState.from_vector(y)
    k1 = walker.evaluate(xa.agent1.q, xa.agent1.v)
    k2 = walker.evaluate(xa.agent2.q, xa.agent2.v)
    assert abs(sc.bar.residual(k1.pos("end_effector"), k2.pos("end_effector"))) < 1e-12
    for k, v in ((k1, xa.agent1.v), (k2, xa.agent2.v)):
        for foot in ("foot_a", "foot_b"):
            assert np.max(np.abs(k.jac(foot) @ v)) < 1e-12
    assert np.allclose(sc.project(y), y, atol=1e-12)


def test_single_agent_nominal_orbit_is_stable(walker, graph, outputs, gait):
    S = AgentSystem(walker, graph, NominalController(walker, graph, gait, outputs),
                    gait.durations)
    res = stability_report(S, np.array(gait.meta["fixed_point"]), Section((1,)), [0],
                           ExecutorConfig(dt=gait.meta["dt"], record=False),
                           period_hint=gait.period)
    assert res.residual < 1e-6
    assert res.spectral_radius < 1.0


def test_audits_on_single_agent_stride(walker, graph, outputs, gait):
    S = AgentSystem(walker, graph, NominalController(walker, graph, gait, outputs),
                    gait.durations)
    out = step_hybrid(ExecutorConfig(dt=gait.meta["dt"]), S, np.array(gait.meta["fixed_point"]),
                      Mode((1,), (0.0,)), 0.0, gait.period + 0.01,
                      stop=lambda ev, mode: mode.domains == (1,))
    rep = audits(out, walker, graph=graph)
    assert rep["contact_drift"] < 1e-9
    assert rep["energy_residual"] < 1e-3
    assert rep["samples"] == len(out.t)


def test_result_json_is_sorted_and_stable():
    r = PoincareResult(np.zeros(2), np.eye(2), np.array([1.0, 0.5]), 1.0, (1, 1), [0], 0.0,
                       np.array([1e-6, 1e-6]))
    assert r.to_json() == r.to_json()
    assert list(json.loads(r.to_json())) == sorted(json.loads(r.to_json()))
