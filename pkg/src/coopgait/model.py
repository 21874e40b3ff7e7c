"""Robot models as kinematic trees, and point kinematics.

A model document is versioned structured text (YAML).  Floating bases are
expanded into chains of massless primitive joints so that the generalized
coordinates are the base position followed by roll-pitch-yaw (spatial) or
pitch (planar), matching ``q = col(p_b, phi_b, q_body)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import _kernels as K

SCHEMA_VERSION = 1
GIMBAL_TOL = 1e-6
KIN_CACHE_SIZE = 16


class ModelError(ValueError):
    """Schema or validation failure; ``path`` names the offending entry."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class Body:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    joint_type: str
    joint_name: str
    parent: str | None
    origin: np.ndarray
    axis: np.ndarray


@dataclass(frozen=True)
class BodyPoint:
    name: str
    body: str
    offset: np.ndarray


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Validated kinematic tree with inertial data, contacts and actuation map."""

    name: str
    gravity: np.ndarray
    bodies: tuple[Body, ...]
    contacts: dict[str, BodyPoint]
    end_effector: BodyPoint
    speed_point: BodyPoint
    actuated: tuple[str, ...]
    coord_names: tuple[str, ...]
    base_type: str | None
    B: np.ndarray
    # flattened primitive-joint arrays consumed by the kernels
    _parent: np.ndarray = field(repr=False)
    _jtype: np.ndarray = field(repr=False)
    _axis: np.ndarray = field(repr=False)
    _origin: np.ndarray = field(repr=False)
    _dof: np.ndarray = field(repr=False)
    _mass: np.ndarray = field(repr=False)
    _com: np.ndarray = field(repr=False)
    _inertia: np.ndarray = field(repr=False)
    _frame: dict[str, int] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.coord_names)

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def planar(self) -> bool:
        return self.base_type == "floating-planar"

    @property
    def contact_dim(self) -> int:
        """Constraint rows contributed by one point contact."""
        return 2 if self.planar else 3

    @property
    def horizontal_indices(self) -> tuple[int, ...]:
        if self.base_type == "floating-planar":
            return (0,)
        if self.base_type == "floating-spatial":
            return (0, 1)
        return ()

    @property
    def vertical_index(self) -> int | None:
        if self.base_type == "floating-planar":
            return 1
        if self.base_type == "floating-spatial":
            return 2
        return None

    @property
    def roll_index(self) -> int | None:
        return 3 if self.base_type == "floating-spatial" else None

    @property
    def pitch_index(self) -> int | None:
        if self.base_type == "floating-planar":
            return 2
        if self.base_type == "floating-spatial":
            return 4
        return None

    def point(self, point_id: str) -> BodyPoint:
        if point_id in self.contacts:
            return self.contacts[point_id]
        if point_id in ("end_effector", self.end_effector.name):
            return self.end_effector
        if point_id in ("speed_point", self.speed_point.name):
            return self.speed_point
        raise KeyError(f"unknown point id {point_id!r}")

    def point_arrays(self, point_ids) -> tuple[np.ndarray, np.ndarray]:
        pts = [self.point(p) for p in point_ids]
        body = np.array([self._frame[p.body] for p in pts], dtype=np.int64)
        off = np.array([p.offset for p in pts], dtype=float).reshape(len(pts), 3)
        return body, off

    @cached_property
    def _point_table(self):
        names = list(self.contacts) + ["end_effector", "speed_point"]
        body, off = self.point_arrays(names)
        return {nm: i for i, nm in enumerate(names)}, body, off

    @cached_property
    def _kin_cache(self) -> dict:
        return {}

    def evaluate(self, q, v, need_dyn: bool = True) -> "Kinematics":
        """D, H and kinematics of every declared point in one sweep.

        The last few results are memoized on the exact (q, v) bytes; returned
        arrays are read-only.
        """
        q = np.ascontiguousarray(q, dtype=float)
        v = np.ascontiguousarray(v, dtype=float)
        cache = self._kin_cache
        key = q.tobytes() + v.tobytes()
        hit = cache.get(key)
        if hit is not None and (hit[0] or not need_dyn):
            return hit[1]
        index, body, off = self._point_table
        D, H, P, J, Jd = K.dynamics_terms(
            q, v, self._parent, self._jtype, self._axis, self._origin, self._dof,
            self._mass, self._com, self._inertia, self.gravity, body, off, need_dyn)
        for a in (D, H, P, J, Jd):
            a.flags.writeable = False
        kin = Kinematics(D, H, P, J, Jd, index)
        if len(cache) >= KIN_CACHE_SIZE:
            cache.pop(next(iter(cache)))
        cache[key] = (need_dyn, kin)
        return kin

    def check_configuration(self, q: np.ndarray) -> None:
        if self.base_type == "floating-spatial" and abs(np.cos(q[4])) < GIMBAL_TOL:
            raise ModelError("roll-pitch-yaw base at gimbal singularity (pitch = +-pi/2)")

    def kernel_terms(self, q, v, point_ids=(), need_dyn=True):
        body, off = self.point_arrays(point_ids)
        return K.dynamics_terms(
            np.ascontiguousarray(q, dtype=float), np.ascontiguousarray(v, dtype=float),
            self._parent, self._jtype, self._axis, self._origin, self._dof,
            self._mass, self._com, self._inertia, self.gravity, body, off, need_dyn)


@dataclass(frozen=True, eq=False)
class Kinematics:
    D: np.ndarray
    H: np.ndarray
    P: np.ndarray
    J: np.ndarray
    Jd: np.ndarray
    index: dict

    def pos(self, point_id: str) -> np.ndarray:
        return self.P[self.index[point_id]]

    def jac(self, point_id: str) -> np.ndarray:
        return self.J[self.index[point_id]]

    def jdv(self, point_id: str) -> np.ndarray:
        return self.Jd[self.index[point_id]]


@dataclass(frozen=True, eq=False)
class AgentState:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).copy()
        v = np.asarray(self.v, dtype=float).copy()
        if q.shape != v.shape or q.ndim != 1:
            raise ValueError("q and v must be 1-D with equal length")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise ValueError("state has non-finite entries")
        q.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.v])

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n], x[n:])


@dataclass(frozen=True, eq=False)
class AugmentedState:
    agent1: AgentState
    agent2: AgentState

    def __post_init__(self):
        if self.agent1.q.shape != self.agent2.q.shape:
            raise ValueError("agents must share the same model structure")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.agent1.x, self.agent2.x])

    @classmethod
    def from_vector(cls, x) -> "AugmentedState":
        x = np.asarray(x, dtype=float)
        h = x.size // 2
        return cls(AgentState.from_vector(x[:h]), AgentState.from_vector(x[h:]))


def composed_dimensions(m1: "RobotModel", m2: "RobotModel") -> tuple[int, int]:
    """(states, inputs) of the two-agent system: 2 n1 + 2 n2 and m1 + m2."""
    return 2 * (m1.n + m2.n), m1.m + m2.m


# ---------------------------------------------------------------- loading

_JOINT_TYPES = ("floating-planar", "floating-spatial", "revolute", "prismatic", "fixed")


def _vec3(value, path, default=None) -> np.ndarray:
    if value is None:
        if default is None:
            raise ModelError("missing 3-vector", path)
        value = default
    arr = np.asarray(value, dtype=float)
    if arr.shape == (2,):
        arr = np.append(arr, 0.0)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ModelError(f"expected a finite 3-vector, got {value!r}", path)
    return arr


def _inertia(value, path) -> np.ndarray:
    if np.isscalar(value):
        val = float(value)
        I = np.eye(3) * val
    else:
        I = np.asarray(value, dtype=float)
        if I.shape == (3,):
            I = np.diag(I)
    if I.shape != (3, 3) or not np.all(np.isfinite(I)):
        raise ModelError("inertia must be a scalar, 3-vector or 3x3 matrix", path)
    if not np.allclose(I, I.T, atol=1e-12):
        raise ModelError("inertia matrix not symmetric", path)
    if np.linalg.eigvalsh(I).min() < -1e-12:
        raise ModelError("inertia matrix not positive semidefinite", path)
    return I


def load_model(source: str | Path | dict[str, Any]) -> RobotModel:
    """Parse and validate a model document (path, YAML text, or mapping)."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                        and Path(source).exists()):
            text = Path(source).read_text()
        doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ModelError("model document must be a mapping")
    return _build(doc)


def _build(doc: dict) -> RobotModel:
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ModelError(f"unsupported schema_version {version}", "schema_version")
    name = str(doc.get("name", "robot"))
    gravity = _vec3(doc.get("gravity"), "gravity", default=[0.0, 0.0, -9.81])
    raw = doc.get("bodies")
    if not isinstance(raw, list) or not raw:
        raise ModelError("bodies must be a non-empty list", "bodies")

    bodies: list[Body] = []
    names: set[str] = set()
    for i, b in enumerate(raw):
        path = f"bodies[{i}]"
        if not isinstance(b, dict) or "name" not in b:
            raise ModelError("body needs a name", path)
        bname = str(b["name"])
        if bname in names or bname == "world":
            raise ModelError(f"duplicate body name {bname!r}", path + ".name")
        names.add(bname)
        mass = float(b.get("mass", 0.0))
        if not mass > 0:
            raise ModelError(f"nonpositive mass {mass}", path + ".mass")
        joint = b.get("joint") or {}
        jtype = joint.get("type")
        if jtype not in _JOINT_TYPES:
            raise ModelError(f"unknown joint type {jtype!r}", path + ".joint.type")
        parent = joint.get("parent", "world")
        parent = None if parent in (None, "world") else str(parent)
        axis = _vec3(joint.get("axis"), path + ".joint.axis", default=[0.0, 0.0, 1.0])
        if jtype in ("revolute", "prismatic"):
            nrm = np.linalg.norm(axis)
            if nrm < 1e-12:
                raise ModelError("zero joint axis", path + ".joint.axis")
            axis = axis / nrm
        bodies.append(Body(
            name=bname, mass=mass,
            com=_vec3(b.get("com"), path + ".com", default=[0.0, 0.0, 0.0]),
            inertia=_inertia(b.get("inertia", 0.0), path + ".inertia"),
            joint_type=jtype, joint_name=str(joint.get("name", bname)),
            parent=parent,
            origin=_vec3(joint.get("origin"), path + ".joint.origin", default=[0.0, 0.0, 0.0]),
            axis=axis))

    by_name = {b.name: b for b in bodies}
    for i, b in enumerate(bodies):
        path = f"bodies[{i}].joint.parent"
        if b.parent is not None and b.parent not in by_name:
            raise ModelError(f"unknown parent {b.parent!r}", path)
        # walk to the root; revisiting a body means a cycle
        seen = {b.name}
        cur = b.parent
        while cur is not None:
            if cur in seen:
                raise ModelError("cyclic tree", path)
            seen.add(cur)
            cur = by_name[cur].parent
    floating = [b for b in bodies if b.joint_type.startswith("floating")]
    if len(floating) > 1:
        raise ModelError("at most one floating base allowed", "bodies")
    for b in floating:
        if b.parent is not None:
            raise ModelError("floating base must be a child of world", f"bodies.{b.name}")
    base_type = floating[0].joint_type if floating else None

    # topological order: parents first, stable w.r.t. document order
    ordered: list[Body] = []
    placed: set[str] = set()
    while len(ordered) < len(bodies):
        for b in bodies:
            if b.name not in placed and (b.parent is None or b.parent in placed):
                ordered.append(b)
                placed.add(b.name)

    parent_idx, jtype, axes, origins, dofs = [], [], [], [], []
    masses, coms, inertias = [], [], []
    frame: dict[str, int] = {}
    coord_names: list[str] = []
    joint_dof: dict[str, int] = {}

    def prim(par, jt, axis, origin, dof, mass=0.0, com=None, inertia=None):
        parent_idx.append(par)
        jtype.append(jt)
        axes.append(axis)
        origins.append(origin)
        dofs.append(dof)
        masses.append(mass)
        coms.append(np.zeros(3) if com is None else com)
        inertias.append(np.zeros((3, 3)) if inertia is None else inertia)
        return len(parent_idx) - 1

    ex, ey, ez = np.eye(3)
    zero = np.zeros(3)
    for b in ordered:
        par = -1 if b.parent is None else frame[b.parent]
        if b.joint_type == "floating-planar":
            base = len(coord_names)
            coord_names += [f"{b.name}.x", f"{b.name}.y", f"{b.name}.pitch"]
            k = prim(-1, K.PRISMATIC, ex, zero, base)
            k = prim(k, K.PRISMATIC, ey, zero, base + 1)
            k = prim(k, K.REVOLUTE, ez, zero, base + 2, b.mass, b.com, b.inertia)
        elif b.joint_type == "floating-spatial":
            base = len(coord_names)
            coord_names += [f"{b.name}.{c}" for c in ("x", "y", "z", "roll", "pitch", "yaw")]
            k = prim(-1, K.PRISMATIC, ex, zero, base)
            k = prim(k, K.PRISMATIC, ey, zero, base + 1)
            k = prim(k, K.PRISMATIC, ez, zero, base + 2)
            k = prim(k, K.REVOLUTE, ez, zero, base + 5)
            k = prim(k, K.REVOLUTE, ey, zero, base + 4)
            k = prim(k, K.REVOLUTE, ex, zero, base + 3, b.mass, b.com, b.inertia)
        elif b.joint_type == "fixed":
            k = prim(par, K.FIXED, b.axis, b.origin, -1, b.mass, b.com, b.inertia)
        else:
            jt = K.REVOLUTE if b.joint_type == "revolute" else K.PRISMATIC
            if b.joint_name in joint_dof:
                raise ModelError(f"duplicate joint name {b.joint_name!r}", f"bodies.{b.name}.joint")
            joint_dof[b.joint_name] = len(coord_names)
            coord_names.append(b.joint_name)
            k = prim(par, jt, b.axis, b.origin, joint_dof[b.joint_name], b.mass, b.com, b.inertia)
        frame[b.name] = k

    n = len(coord_names)
    actuated = tuple(str(a) for a in doc.get("actuated", []) or [])
    B = np.zeros((n, len(actuated)))
    for j, a in enumerate(actuated):
        if a not in joint_dof:
            raise ModelError(f"actuated joint {a!r} is not a 1-DOF joint", f"actuated[{j}]")
        B[joint_dof[a], j] = 1.0
    if len(set(actuated)) != len(actuated):
        raise ModelError("duplicate actuated joint", "actuated")

    def point(entry, path, default_name):
        if not isinstance(entry, dict) or "body" not in entry:
            raise ModelError("point needs a body", path)
        if entry["body"] not in by_name:
            raise ModelError(f"unknown body {entry['body']!r}", path + ".body")
        return BodyPoint(str(entry.get("name", default_name)), str(entry["body"]),
                         _vec3(entry.get("offset"), path + ".offset", default=[0.0, 0.0, 0.0]))

    contacts: dict[str, BodyPoint] = {}
    for i, c in enumerate(doc.get("contacts", []) or []):
        pt = point(c, f"contacts[{i}]", f"contact{i}")
        if pt.name in contacts:
            raise ModelError(f"duplicate contact {pt.name!r}", f"contacts[{i}].name")
        contacts[pt.name] = pt
    root = ordered[0].name
    ee_doc = doc.get("end_effector")
    end_effector = (point(ee_doc, "end_effector", "end_effector") if ee_doc is not None
                    else BodyPoint("end_effector", root, np.zeros(3)))
    sp_doc = doc.get("speed_point")
    speed_point = (point(sp_doc, "speed_point", "speed_point") if sp_doc is not None
                   else BodyPoint("speed_point", floating[0].name if floating else root, np.zeros(3)))

    return RobotModel(
        name=name, gravity=gravity, bodies=tuple(bodies), contacts=contacts,
        end_effector=end_effector, speed_point=speed_point, actuated=actuated,
        coord_names=tuple(coord_names), base_type=base_type, B=B,
        _parent=np.array(parent_idx, dtype=np.int64), _jtype=np.array(jtype, dtype=np.int64),
        _axis=np.array(axes, dtype=float), _origin=np.array(origins, dtype=float),
        _dof=np.array(dofs, dtype=np.int64), _mass=np.array(masses, dtype=float),
        _com=np.array(coms, dtype=float), _inertia=np.array(inertias, dtype=float),
        _frame=frame)


# ---------------------------------------------------------- point kinematics

def point_position(model: RobotModel, q, point_id: str) -> np.ndarray:
    """World position of a body-fixed point (planar models have z = 0)."""
    model.point(point_id)
    _, _, P, _, _ = model.kernel_terms(q, np.zeros(model.n), (point_id,), need_dyn=False)
    return P[0]


def point_jacobian(model: RobotModel, q, point_id: str) -> np.ndarray:
    """3 x n Jacobian of :func:`point_position` with respect to q."""
    model.point(point_id)
    _, _, _, J, _ = model.kernel_terms(q, np.zeros(model.n), (point_id,), need_dyn=False)
    return J[0]


def jdot_v(model: RobotModel, q, v, point_id: str) -> np.ndarray:
    """d/dt(J(q)) v along (q, v): the velocity-product part of the point acceleration."""
    model.point(point_id)
    _, _, _, _, Jd = model.kernel_terms(q, v, (point_id,), need_dyn=False)
    return Jd[0]
