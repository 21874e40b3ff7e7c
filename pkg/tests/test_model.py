import numpy as np
import pytest

from coopgait.fixtures import data_path
from coopgait.model import ModelError, composed_dimensions, load_model

from conftest import random_walker_state
from oracles import fd_jacobian, fd_jdot_v

WALKER_DOC = """
name: tiny
bodies:
  - {name: base, mass: 1.0, joint: {type: floating-planar}}
  - {name: leg, mass: 0.5, com: [0, -0.2, 0], joint: {name: hip, type: revolute, parent: base}}
contacts:
  - {name: foot, body: leg, offset: [0, -0.4, 0]}
actuated: [hip]
"""


def test_walker_dimensions(walker):
    assert (walker.n, walker.m) == (7, 4)
    assert walker.planar and walker.contact_dim == 2
    assert walker.horizontal_indices == (0,)
    assert walker.pitch_index == 2 and walker.roll_index is None
    assert walker.B.shape == (7, 4) and walker.B.sum() == 4


def test_placeholder_composes_to_96_states_36_inputs():
    m = load_model(str(data_path("quadruped_arm.yaml")))
    assert (m.n, m.m) == (24, 18)
    assert composed_dimensions(m, m) == (96, 36)
    assert len(m.contacts) == 4


def test_load_from_text_and_mapping():
    m = load_model(WALKER_DOC)
    assert m.n == 4 and m.m == 1
    assert m.coord_names == ("base.x", "base.y", "base.pitch", "hip")


@pytest.mark.parametrize("patch, path, message", [
    ({"bodies": [{"name": "a", "mass": 1.0, "joint": {"type": "revolute", "parent": "a"}}]},
     "bodies[0].joint.parent", "cyclic tree"),
    ({"bodies": [{"name": "a", "mass": 0.0, "joint": {"type": "revolute"}}]},
     "bodies[0].mass", "nonpositive mass"),
    ({"bodies": [{"name": "a", "mass": 1.0, "joint": {"type": "hinge"}}]},
     "bodies[0].joint.type", "unknown joint type"),
    ({"schema_version": 7, "bodies": []}, "schema_version", "unsupported"),
])
def test_malformed_documents_report_path(patch, path, message):
    with pytest.raises(ModelError) as err:
        load_model(patch)
    assert err.value.path == path
    assert message in str(err.value)


def test_two_body_cycle_detected():
    doc = {"bodies": [
        {"name": "a", "mass": 1.0, "joint": {"type": "revolute", "parent": "b"}},
        {"name": "b", "mass": 1.0, "joint": {"type": "revolute", "parent": "a"}}]}
    with pytest.raises(ModelError, match="cyclic tree"):
        load_model(doc)


def test_unknown_actuated_joint():
    doc = {"bodies": [{"name": "a", "mass": 1.0, "joint": {"type": "revolute"}}],
           "actuated": ["nope"]}
    with pytest.raises(ModelError, match="actuated"):
        load_model(doc)


def test_jacobians_match_finite_differences(walker, rng):
    for _ in range(5):
        q, v = random_walker_state(walker, rng)
        kin = walker.evaluate(q, v)
        for pt in ("foot_a", "foot_b", "end_effector", "speed_point"):
            assert np.allclose(kin.jac(pt), fd_jacobian(walker, q, pt), atol=1e-8)
            assert np.allclose(kin.jdv(pt), fd_jdot_v(walker, q, v, pt), atol=1e-6)


def test_spatial_jacobian_matches_finite_differences(rng):
    m = load_model(str(data_path("quadruped_arm.yaml")))
    q = 0.3 * rng.normal(size=m.n)
    v = rng.normal(size=m.n)
    kin = m.evaluate(q, v)
    for pt in ("fl_foot", "end_effector"):
        assert np.allclose(kin.jac(pt), fd_jacobian(m, q, pt), atol=1e-7)
        assert np.allclose(kin.jdv(pt), fd_jdot_v(m, q, v, pt), atol=1e-5)


def test_mass_matrix_symmetric_positive(walker, rng):
    q, v = random_walker_state(walker, rng)
    D = walker.evaluate(q, v).D
    assert np.allclose(D, D.T, atol=1e-14)
    assert np.linalg.eigvalsh(D).min() > 0


def test_evaluate_cache_returns_readonly_arrays(walker):
    q = np.array([0.0, 0.85, 0.0, 0.2, 0.0, -0.2, 0.0])
    k1 = walker.evaluate(q, np.zeros(7))
    k2 = walker.evaluate(q.copy(), np.zeros(7), need_dyn=False)
    assert k2.D is not None
    with pytest.raises(ValueError):
        k1.D[0, 0] = 1.0
