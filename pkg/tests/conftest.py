import math

import numpy as np
import pytest

from vispick import geom3
from vispick.geom3 import Pose, Vec3


def random_pose(rng, max_angle=math.pi - 0.1, trans_scale=0.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    q = geom3.rodrigues_exp(Vec3.from_array(axis * angle))
    return Pose(q, Vec3.from_array(rng.uniform(-1.0, 1.0, 3) * trans_scale))


def perturbed_pose(pose, rot_angle, trans_dist, rng, forbidden_axis=None):
    """Pose offset from `pose` by exactly (rot_angle, trans_dist).

    With `forbidden_axis` set, the rotation offset is drawn orthogonal to it
    (used for surfaces of revolution whose axial spin is unobservable).
    """
    axis = rng.normal(size=3)
    if forbidden_axis is not None:
        axis -= (axis @ forbidden_axis) * forbidden_axis
    axis /= np.linalg.norm(axis)
    dq = geom3.rodrigues_exp(Vec3.from_array(axis * rot_angle))
    dt = rng.normal(size=3)
    dt = dt / np.linalg.norm(dt) * trans_dist
    return Pose(dq.multiply(pose.rotation),
                Vec3.from_array(pose.translation.to_array() + dt))


def assert_pose_close(a, b, rot_tol, trans_tol):
    rot, trans = geom3.pose_error(a, b)
    assert rot <= rot_tol, f"rotation error {rot} > {rot_tol}"
    assert trans <= trans_tol, f"translation error {trans} > {trans_tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
