"""Rigid-body transforms on SE(3).

Conventions used everywhere in this package:

- A ``Pose`` maps points with ``p' = R @ p + t`` (column-vector convention).
- All frames are right-handed, all lengths are meters, cameras look along +z.
- Quaternions are stored ``(w, x, y, z)`` and canonicalized to ``w >= 0``
  so that pose equality is testable (q and -q encode the same rotation).
- A pose named ``a_to_b`` maps coordinates expressed in frame ``b`` into
  frame ``a``:  ``p_a = a_to_b(p_b)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Canonical frame names shared across the package.
FRAME_ROBOT_BASE = "robot_base"
FRAME_CAMERA = "camera"
FRAME_END_EFFECTOR = "end_effector"
FRAME_MARKER = "marker"
FRAME_OBJECT = "object"

_UNIT_TOL = 1e-9


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for the principal-branch log."""


@dataclass(frozen=True)
class Vec3:
    """3D point or direction, meters (unitless for directions)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("Vec3 components must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Vec3":
        a = np.asarray(a, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z), canonicalized to w >= 0.

    The constructor rejects inputs whose norm deviates from 1 by more than
    1e-9; use :meth:`normalized` to build one from approximate components.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"quaternion norm {n!r} deviates from 1 by more than {_UNIT_TOL}")
        if self.w < 0.0:
            object.__setattr__(self, "w", -self.w)
            object.__setattr__(self, "x", -self.x)
            object.__setattr__(self, "y", -self.y)
            object.__setattr__(self, "z", -self.z)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def normalized(cls, w: float, x: float, y: float, z: float) -> "UnitQuaternion":
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n < 1e-300:
            raise ValueError("cannot normalize a zero quaternion")
        return cls(w / n, x / n, y / n, z / n)

    @classmethod
    def from_matrix(cls, m) -> "UnitQuaternion":
        """Shepperd's method; `m` must be a proper rotation matrix."""
        m = np.asarray(m, dtype=float)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return cls.normalized(w, x, y, z)

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=float,
        )

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion.normalized(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Rotate one or many 3-vectors (shape (3,) or (N, 3))."""
        return np.asarray(v, dtype=float) @ self.to_matrix().T

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        s = math.sqrt(self.x**2 + self.y**2 + self.z**2)
        return 2.0 * math.atan2(s, self.w)


@dataclass(frozen=True)
class Pose:
    """SE(3) transform: p' = R @ p + t."""

    rotation: UnitQuaternion
    translation: Vec3

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), Vec3(0.0, 0.0, 0.0))

    @classmethod
    def from_rt(cls, r: np.ndarray, t) -> "Pose":
        return cls(UnitQuaternion.from_matrix(r), Vec3.from_array(t))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls.from_rt(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation.to_array()
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) or many (N, 3) points."""
        return self.rotation.rotate(points) + self.translation.to_array()


def compose(a: Pose, b: Pose) -> Pose:
    """Pose mapping p to a(b(p))."""
    q = a.rotation.multiply(b.rotation)
    t = a.rotation.rotate(b.translation.to_array()) + a.translation.to_array()
    return Pose(q, Vec3.from_array(t))


def invert(p: Pose) -> Pose:
    q = p.rotation.conjugate()
    t = -q.rotate(p.translation.to_array())
    return Pose(q, Vec3.from_array(t))


def transform_point(p: Pose, v: Vec3) -> Vec3:
    return Vec3.from_array(p.apply(v.to_array()))


def rodrigues_exp(axis_angle: Vec3) -> UnitQuaternion:
    """Quaternion for a rotation of |v| radians about v/|v|; v = 0 gives identity."""
    a = axis_angle.to_array()
    theta = float(np.linalg.norm(a))
    half = 0.5 * theta
    if theta < 1e-12:
        # sin(half)/theta -> 1/2 as theta -> 0
        s = 0.5 - theta * theta / 48.0
    else:
        s = math.sin(half) / theta
    return UnitQuaternion.normalized(math.cos(half), a[0] * s, a[1] * s, a[2] * s)


def rodrigues_log(q: UnitQuaternion) -> Vec3:
    """Axis-angle vector of q, principal branch only.

    Raises :class:`AngleNearPi` when the rotation angle is within 1e-6 of pi,
    where the axis direction is numerically ill-determined; callers (the
    hand-eye station pipeline) are expected to re-sample such motions.
    """
    s = math.sqrt(q.x**2 + q.y**2 + q.z**2)
    theta = 2.0 * math.atan2(s, q.w)  # [0, pi] since w >= 0
    if theta >= math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta} rad within 1e-6 of pi")
    if s < 1e-12:
        # q ~ (1, v/2): theta ~ 2|v|/... use first-order scale 2/w
        return Vec3(2.0 * q.x / q.w, 2.0 * q.y / q.w, 2.0 * q.z / q.w)
    k = theta / s
    return Vec3(q.x * k, q.y * k, q.z * k)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle of a_r^-1 b_r in [0, pi], |a_t - b_t|)."""
    rel = a.rotation.conjugate().multiply(b.rotation)
    # atan2 keeps full precision for tiny angles where acos(dot) loses it
    rot = 2.0 * math.atan2(math.sqrt(rel.x**2 + rel.y**2 + rel.z**2), abs(rel.w))
    d = a.translation.to_array() - b.translation.to_array()
    return rot, float(np.linalg.norm(d))


def pose_to_dict(p: Pose) -> dict:
    """JSON-ready form {"q": [w,x,y,z], "t": [x,y,z]} at full float64 precision."""
    q, t = p.rotation, p.translation
    return {"q": [q.w, q.x, q.y, q.z], "t": [t.x, t.y, t.z]}


def pose_from_dict(d: dict) -> Pose:
    q = d["q"]
    t = d["t"]
    return Pose(UnitQuaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3])),
                Vec3(float(t[0]), float(t[1]), float(t[2])))


def pose_to_json(p: Pose) -> str:
    return json.dumps(pose_to_dict(p), sort_keys=True)


def pose_from_json(s: str) -> Pose:
    return pose_from_dict(json.loads(s))
