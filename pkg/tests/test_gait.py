import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopgait import fixtures
from coopgait.fixtures import SeedParams, seed_configuration, seed_gait
from coopgait.gait import (DomainTrajectory, Gait, gait_from_dict, gait_to_dict, lift_orbit,
                           load_gait, phase, save_gait, shoot, translate)
from coopgait.model import AgentState


def _poly_domain(coeffs, quintic):
    """One-coordinate domain sampled from a polynomial in tau."""
    p = np.polynomial.Polynomial(coeffs)
    tau = np.linspace(0, 1, 5)
    q = p(tau)[:, None]
    dq = p.deriv(1)(tau)[:, None]
    ddq = p.deriv(2)(tau)[:, None] if quintic else None
    return DomainTrajectory(1, 0.5, tau, q, dq, np.zeros(5), np.zeros(5), np.zeros((5, 0)), ddq), p


@pytest.mark.parametrize("coeffs, quintic", [([1, -2, 3, 0.5], False),
                                             ([0.3, 1, -2, 3, 0.5, -1.2], True)])
def test_splines_reproduce_polynomials(coeffs, quintic):
    dom, p = _poly_domain(coeffs, quintic)
    for tau in np.linspace(0, 1, 23):
        assert dom.eval(tau)[0] == pytest.approx(p(tau), abs=1e-12)
        assert dom.eval(tau, 1)[0] == pytest.approx(p.deriv(1)(tau), abs=1e-10)
        assert dom.eval(tau, 2)[0] == pytest.approx(p.deriv(2)(tau), abs=1e-9)


def test_knots_must_span_unit_interval():
    with pytest.raises(ValueError):
        DomainTrajectory(1, 1.0, [0.0, 0.5], np.zeros((2, 1)), np.zeros((2, 1)), [0, 0], [0, 0],
                         np.zeros((2, 0)))
    with pytest.raises(ValueError):
        DomainTrajectory(1, 0.0, [0.0, 1.0], np.zeros((2, 1)), np.zeros((2, 1)), [0, 0], [0, 0],
                         np.zeros((2, 0)))


def test_phase_is_clamped():
    assert phase(1.0, 1.25, 0.5) == 0.5
    assert phase(1.0, 2.0, 0.5) == 1.0


@given(st.floats(-5, 5), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.05, 1.0))
def test_phase_is_monotone_and_bounded(t_entry, a, b, T):
    lo, hi = sorted((a, b))
    p_lo, p_hi = phase(t_entry, t_entry + lo, T), phase(t_entry, t_entry + hi, T)
    assert 0.0 <= p_lo <= p_hi <= 1.0


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_translations_compose(walker, a, b):
    x = AgentState(np.linspace(0.1, 0.7, walker.n), np.linspace(-1, 1, walker.n))
    y = translate(translate(x, [a], walker), [b], walker)
    z = translate(x, [a + b], walker)
    assert np.allclose(y.q, z.q, atol=1e-12) and np.array_equal(y.v, x.v)


def test_translate_moves_only_horizontal_coordinates(walker):
    x = AgentState(np.arange(7.0), np.ones(7))
    y = translate(x, [0.8], walker)
    assert y.q[0] == 0.8 and np.array_equal(y.q[1:], x.q[1:])
    assert np.array_equal(y.v, x.v)


def test_desired_velocity_is_time_derivative(gait):
    for v in gait.order:
        T = gait.duration(v)
        for tau in (0.2, 0.5, 0.8):
            h = 1e-6
            d = gait.desired(v, tau)
            fd = (gait.desired(v, tau + h).q - gait.desired(v, tau - h).q) / (2 * h * T)
            assert np.allclose(d.v, fd, atol=1e-6)
            fa = (gait.desired(v, tau + h).v - gait.desired(v, tau - h).v) / (2 * h * T)
            assert np.allclose(d.a, fa, atol=1e-4)


def test_refined_gait_is_continuous_and_periodic(gait, graph):
    order = gait.order
    for a, b in zip(order, order[1:] + order[:1]):
        qa = gait.desired(a, 1.0).q.copy()
        qb = gait.desired(b, 0.0).q.copy()
        if b == order[0]:
            qb[gait.speed_index] += gait.stride
        assert np.allclose(qa, qb, atol=1e-9)
        if graph.spec(a).reset != "impact":
            assert np.allclose(gait.desired(a, 1.0).v, gait.desired(b, 0.0).v, atol=1e-8)
    assert gait.stride > 0
    assert gait.meta["fixed_point_residual"] < 1e-8


def test_fixed_point_is_the_gait_start(gait):
    x = np.array(gait.meta["fixed_point"])
    _, _, st0 = gait.state(0.0)
    assert np.max(np.abs(x - st0.x)) < 1e-6


def test_orbit_sampler_advances_one_stride_per_period(gait):
    _, _, a = gait.state(0.3)
    _, _, b = gait.state(0.3 + 2 * gait.period)
    assert b.q[0] - a.q[0] == pytest.approx(2 * gait.stride, abs=1e-12)
    assert np.allclose(a.q[1:], b.q[1:]) and np.allclose(a.v, b.v)


@given(st.floats(min_value=0.0, max_value=3.0))
def test_lifted_orbit_is_a_pure_translation(gait, walker, t):
    L = lift_orbit(gait, (0.8, 0.6), walker)
    vw, taus, x1, x2 = L(t)
    assert vw[0] == vw[1] and taus[0] == taus[1]
    assert x2.q[0] - x1.q[0] == pytest.approx(0.8)
    assert np.array_equal(x1.q[1:], x2.q[1:]) and np.array_equal(x1.v, x2.v)


def test_lift_rejects_zero_offset(gait, walker):
    with pytest.raises(ValueError):
        lift_orbit(gait, (0.0, 0.0), walker)


def test_round_trip_through_yaml(gait, tmp_path):
    path = tmp_path / "g.yaml"
    save_gait(gait, path)
    g2 = load_gait(path)
    for v in gait.order:
        for tau in (0.0, 0.37, 1.0):
            a, b = gait.desired(v, tau), g2.desired(v, tau)
            assert np.array_equal(a.q, b.q) and np.array_equal(a.v, b.v)
    assert gait_to_dict(gait_from_dict(gait_to_dict(gait))) == gait_to_dict(gait)


def test_with_durations(gait):
    g2 = gait.with_durations({1: 0.5})
    assert g2.duration(1) == 0.5 and g2.period == pytest.approx(gait.period + 0.25)


def test_seed_has_feet_on_ground_where_expected(walker):
    p = SeedParams()
    T = p.t_double + p.t_single
    for t, planted in ((0.0, ("foot_a", "foot_b")), (p.t_double + 0.1, ("foot_a",)),
                       (T + p.t_double + 0.1, ("foot_b",))):
        kin = walker.evaluate(seed_configuration(t, p), np.zeros(7), need_dyn=False)
        for foot in planted:
            assert abs(kin.pos(foot)[1]) < 1e-12
    g = seed_gait(walker, p)
    assert g.period == pytest.approx(2 * T)
    assert len(g.domains[1].tau) == p.knots


def test_shooting_recovers_perturbed_fixed_point(walker, graph, outputs, gait):
    from coopgait.control import NominalController
    from coopgait.hybrid import AgentSystem, ExecutorConfig
    S = AgentSystem(walker, graph, NominalController(walker, graph, gait, outputs),
                    gait.durations)
    x_star = np.array(gait.meta["fixed_point"])
    x0 = x_star.copy()
    x0[[1, 8, 9]] += [1e-4, -2e-4, 1e-4]
    x, res, steps = shoot(S, x0, gait, walker, ExecutorConfig(dt=gait.meta["dt"], record=False))
    assert res < 1e-8 and steps >= 1
    assert np.max(np.abs(x - x_star)) < 1e-6
