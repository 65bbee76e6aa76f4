"""vispick: vision-guided pick-and-place toolkit.

Camera and hand-eye calibration, point-cloud registration, grasp teaching
and transfer, waypoint planning, and a synthetic-scene simulator that
provides ground truth for all of it.
"""

from .geom3 import (FRAME_CAMERA, FRAME_END_EFFECTOR, FRAME_MARKER,
                    FRAME_OBJECT, FRAME_ROBOT_BASE, Pose, UnitQuaternion,
                    Vec3, compose, invert, pose_error, transform_point)
from .cloud import Aabb, KdTree, PointCloud
from .register import AlignmentResult, IcpParams, align_object, icp, umeyama_fit
from .calib import CameraIntrinsics, PlanarView
from .handeye import HandEyeResult, MarkerSpec, StationSample
from .graspdb import FaceRecord, GraspDatabase, MatchResult
from .pipeline import PickPlacePlan, ShapeSpec, ViewSpec, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Aabb", "AlignmentResult", "CameraIntrinsics", "FaceRecord",
    "FRAME_CAMERA", "FRAME_END_EFFECTOR", "FRAME_MARKER", "FRAME_OBJECT",
    "FRAME_ROBOT_BASE", "GraspDatabase", "HandEyeResult", "IcpParams",
    "KdTree", "MarkerSpec", "MatchResult", "PickPlacePlan", "PlanarView",
    "PointCloud", "Pose", "ShapeSpec", "StationSample", "UnitQuaternion",
    "Vec3", "ViewSpec", "align_object", "compose", "icp", "invert",
    "pose_error", "run_pipeline", "transform_point", "umeyama_fit",
]
