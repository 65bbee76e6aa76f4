"""Synthetic-scene simulator, pick-and-place planner, and the end-to-end run.

The simulator is the ground-truth oracle for the whole package: it fabricates
chessboard correspondences, hand-eye stations, and depth-camera-style object
views (normal-based back-face culling, no ray-cast occlusion), so every stage
of the pipeline can be checked against the poses that generated its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import calib, geom3, graspdb, handeye, register
from .cloud import Aabb, PointCloud, crop_aabb, voxel_downsample
from .geom3 import FRAME_ROBOT_BASE, Pose, UnitQuaternion, Vec3

SHAPE_KINDS = ("box", "cylinder", "lshape")
VISIBILITY_MODES = ("full", "camera_facing")
GRIPPER_ACTIONS = ("none", "open", "close")

REPORT_SCHEMA_VERSION = 1


class InvalidSpec(ValueError):
    pass


class EmptyAfterCulling(RuntimeError):
    pass


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the partial report."""

    def __init__(self, stage: str, cause: Exception, report: dict):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.report = report


@dataclass(frozen=True)
class ShapeSpec:
    """Surface-sampled primitive.

    dimensions by kind:
      box      (lx, ly, lz), centered on the origin
      cylinder (radius, height), axis z, centered
      lshape   (a, b, ta, tb, h): an L cross-section (outer a x b, arm
               thicknesses ta, tb) extruded by h, bounding box centered
    """

    kind: str
    dimensions: tuple
    sample_density: float = 80000.0  # points per m^2

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidSpec(f"unknown shape kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        expected = {"box": 3, "cylinder": 2, "lshape": 5}[self.kind]
        if len(dims) != expected:
            raise InvalidSpec(f"{self.kind} needs {expected} dimensions, got {len(dims)}")
        if any(d <= 0.0 for d in dims) or self.sample_density <= 0.0:
            raise InvalidSpec("dimensions and sample_density must be positive")
        if self.kind == "lshape":
            a, b, ta, tb, _ = dims
            if ta >= a or tb >= b:
                raise InvalidSpec("lshape arm thicknesses must be below outer dims")


@dataclass(frozen=True)
class ViewSpec:
    object_pose: Pose
    camera_pose: Pose
    noise_sigma: float = 0.0
    visibility: str = "camera_facing"
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.visibility not in VISIBILITY_MODES:
            raise ValueError(f"visibility must be one of {VISIBILITY_MODES}")


@dataclass(frozen=True)
class Waypoint:
    pose: Pose
    gripper_action: str
    label: str

    def to_dict(self) -> dict:
        return {"pose": geom3.pose_to_dict(self.pose),
                "gripper_action": self.gripper_action,
                "label": self.label}


@dataclass(frozen=True)
class PickPlacePlan:
    waypoints: tuple

    def to_dict(self) -> dict:
        return {"waypoints": [w.to_dict() for w in self.waypoints]}

    def labels(self) -> list:
        return [w.label for w in self.waypoints]


# --- Surface sampling ---------------------------------------------------------

def _sample_rect(rng, count, origin, u_vec, v_vec, normal):
    uv = rng.random((count, 2))
    pts = origin + uv[:, :1] * u_vec + uv[:, 1:] * v_vec
    nrm = np.tile(normal / np.linalg.norm(normal), (count, 1))
    return pts, nrm


def _face_count(area: float, density: float) -> int:
    return max(1, int(round(area * density)))


def _synth_box(dims, density, rng):
    lx, ly, lz = dims
    hx, hy, hz = lx / 2, ly / 2, lz / 2
    faces = [
        # (origin, u, v, normal)
        ((hx, -hy, -hz), (0, ly, 0), (0, 0, lz), (1, 0, 0)),
        ((-hx, -hy, -hz), (0, ly, 0), (0, 0, lz), (-1, 0, 0)),
        ((-hx, hy, -hz), (lx, 0, 0), (0, 0, lz), (0, 1, 0)),
        ((-hx, -hy, -hz), (lx, 0, 0), (0, 0, lz), (0, -1, 0)),
        ((-hx, -hy, hz), (lx, 0, 0), (0, ly, 0), (0, 0, 1)),
        ((-hx, -hy, -hz), (lx, 0, 0), (0, ly, 0), (0, 0, -1)),
    ]
    areas = [ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly]
    pts, nrm = [], []
    for (origin, u, v, n), area in zip(faces, areas):
        p, m = _sample_rect(rng, _face_count(area, density),
                            np.array(origin, float), np.array(u, float),
                            np.array(v, float), np.array(n, float))
        pts.append(p)
        nrm.append(m)
    return np.vstack(pts), np.vstack(nrm)


def _synth_cylinder(dims, density, rng):
    radius, height = dims
    hz = height / 2
    pts, nrm = [], []
    n_lat = _face_count(2 * math.pi * radius * height, density)
    theta = rng.random(n_lat) * 2 * math.pi
    z = (rng.random(n_lat) - 0.5) * height
    c, s = np.cos(theta), np.sin(theta)
    pts.append(np.stack([radius * c, radius * s, z], axis=1))
    nrm.append(np.stack([c, s, np.zeros(n_lat)], axis=1))
    for sign in (1.0, -1.0):
        n_cap = _face_count(math.pi * radius * radius, density)
        r = radius * np.sqrt(rng.random(n_cap))
        th = rng.random(n_cap) * 2 * math.pi
        pts.append(np.stack([r * np.cos(th), r * np.sin(th),
                             np.full(n_cap, sign * hz)], axis=1))
        nrm.append(np.tile([0.0, 0.0, sign], (n_cap, 1)))
    return np.vstack(pts), np.vstack(nrm)


def _lshape_polygon(a, b, ta, tb):
    # Counter-clockwise; outward normal of edge (dx, dy) is (dy, -dx).
    return np.array([(0, 0), (a, 0), (a, tb), (ta, tb), (ta, b), (0, b)], float)


def _synth_lshape(dims, density, rng):
    a, b, ta, tb, h = dims
    poly = _lshape_polygon(a, b, ta, tb)
    center = np.array([a / 2, b / 2, 0.0])
    hz = h / 2
    area = a * tb + ta * (b - tb)
    pts, nrm = [], []
    for sign in (1.0, -1.0):
        n_cap = _face_count(area, density)
        got = []
        while len(got) < n_cap:  # rejection sample inside the L cross-section
            cand = rng.random((n_cap, 2)) * (a, b)
            inside = (cand[:, 1] <= tb) | (cand[:, 0] <= ta)
            got.extend(cand[inside].tolist())
        cap = np.array(got[:n_cap])
        pts.append(np.column_stack([cap, np.full(n_cap, sign * hz)]) - center)
        nrm.append(np.tile([0.0, 0.0, sign], (n_cap, 1)))
    for i in range(len(poly)):
        p0, p1 = poly[i], poly[(i + 1) % len(poly)]
        edge = p1 - p0
        length = np.linalg.norm(edge)
        normal = np.array([edge[1], -edge[0], 0.0]) / length
        p, m = _sample_rect(rng, _face_count(length * h, density),
                            np.array([p0[0], p0[1], -hz]) - center,
                            np.array([edge[0], edge[1], 0.0]),
                            np.array([0.0, 0.0, h]), normal)
        pts.append(p)
        nrm.append(m)
    return np.vstack(pts), np.vstack(nrm)


def synth_cloud(spec: ShapeSpec, seed: int) -> PointCloud:
    """Deterministic surface sampling in the object frame, outward normals."""
    rng = np.random.default_rng(seed)
    if spec.kind == "box":
        pts, nrm = _synth_box(spec.dimensions, spec.sample_density, rng)
    elif spec.kind == "cylinder":
        pts, nrm = _synth_cylinder(spec.dimensions, spec.sample_density, rng)
    else:
        pts, nrm = _synth_lshape(spec.dimensions, spec.sample_density, rng)
    return PointCloud(pts, nrm, frame=geom3.FRAME_OBJECT)


def simulate_view(cloud: PointCloud, view: ViewSpec) -> PointCloud:
    """Place the object, cull camera-averted points, add isotropic noise.

    The result is expressed in the robot_base frame.
    """
    placed_pts = view.object_pose.apply(cloud.points)
    normals = (view.object_pose.rotation.rotate(cloud.normals)
               if cloud.normals is not None else None)
    if view.visibility == "camera_facing":
        if normals is None:
            raise ValueError("camera_facing culling needs normals")
        cam = view.camera_pose.translation.to_array()
        keep = np.einsum("ni,ni->n", normals, cam - placed_pts) > 0.0
        if not keep.any():
            raise EmptyAfterCulling("no point faces the camera")
        placed_pts = placed_pts[keep]
        normals = normals[keep]
    if view.noise_sigma > 0.0:
        rng = np.random.default_rng(view.seed)
        placed_pts = placed_pts + rng.normal(0.0, view.noise_sigma, placed_pts.shape)
    return PointCloud(placed_pts, normals, frame=FRAME_ROBOT_BASE)


def concat_clouds(a: PointCloud, b: PointCloud) -> PointCloud:
    if a.frame != b.frame:
        raise ValueError(f"frame mismatch: {a.frame!r} vs {b.frame!r}")
    if (a.normals is None) != (b.normals is None):
        raise ValueError("cannot concatenate clouds with and without normals")
    nrm = np.vstack([a.normals, b.normals]) if a.normals is not None else None
    return PointCloud(np.vstack([a.points, b.points]), nrm, a.frame)


# --- Waypoint planning ---------------------------------------------------------

def plan_pick_place(grasp_in_scene: Pose, place_pose: Pose,
                    approach_offset: float) -> PickPlacePlan:
    """Purely kinematic waypoint plan.

    Approach poses retreat along the gripper -z axis (the tool axis points
    into the object); lift and transit go straight up in the base frame.
    """
    if not approach_offset > 0.0:
        raise ValueError("approach_offset must be > 0")
    back = Pose(UnitQuaternion.identity(), Vec3(0.0, 0.0, -approach_offset))
    up = Vec3(0.0, 0.0, approach_offset).to_array()

    def lifted(p: Pose) -> Pose:
        return Pose(p.rotation, Vec3.from_array(p.translation.to_array() + up))

    waypoints = (
        Waypoint(geom3.compose(grasp_in_scene, back), "none", "approach"),
        Waypoint(grasp_in_scene, "close", "grasp"),
        Waypoint(lifted(grasp_in_scene), "none", "lift"),
        Waypoint(lifted(place_pose), "none", "transit"),
        Waypoint(geom3.compose(place_pose, back), "none", "approach"),
        Waypoint(place_pose, "open", "place"),
        Waypoint(geom3.compose(place_pose, back), "none", "retreat"),
    )
    return PickPlacePlan(waypoints)


# --- Demo configuration ---------------------------------------------------------

def default_demo_config() -> dict:
    """Hardware-free demo: one box taught from 3 faces, 20 random scenes."""
    return {
        "seed": 20260809,
        "cameras": {
            "color": {"fx": 580.0, "fy": 575.0, "cx": 319.5, "cy": 239.5,
                      "skew": 0.0, "k1": -0.08, "k2": 0.01},
            "ir": {"fx": 365.0, "fy": 364.0, "cx": 255.5, "cy": 203.5,
                   "skew": 0.0, "k1": -0.05, "k2": 0.005},
            "rig_rot_deg": [0.4, -0.3, 0.2],   # camB->camA (ir to color)
            "rig_trans_m": [-0.052, 0.0005, 0.004],
        },
        "calibration": {
            "board": {"cols": 9, "rows": 7, "square_size_m": 0.025},
            "views": 10,
            "corner_noise_px": 0.0,
        },
        "depth_check": {"points": 2000, "bias_m": 0.004, "noise_m": 0.001},
        "handeye": {
            "stations": 15,
            "marker_side_m": 0.1,
            "corner_noise_px": 0.0,
            "ee_rot_noise_deg": 0.0,
            "ee_trans_noise_m": 0.0,
        },
        "workspace": {
            "center": [0.55, 0.0],
            "camera_height_m": 1.3,
            "scene_offset_m": 0.05,
            "table_half_extent_m": 0.25,
            "table_density": 20000.0,
            "crop_margin_m": 0.2,
            "crop_z_min_m": 0.005,
            "crop_z_max_m": 0.5,
            "min_view_cos": 0.25,
        },
        "objects": [
            {"object_id": "box1", "kind": "box", "dims": [0.12, 0.08, 0.05],
             "gripper": "two_finger", "faces": 3},
        ],
        "unregistered": [],
        "scenes_per_object": 20,
        "unregistered_scenes": 20,
        "sample_density": 80000.0,
        "cloud_noise_m": 0.001,
        "voxel_size_m": 0.0,
        "icp": {"max_correspondence_dist": 0.01, "max_iterations": 60,
                "convergence_delta_rmse": 1e-7, "variant": "point_to_point"},
        "accept_threshold": 0.7,
        "approach_offset_m": 0.1,
        "place_pose": {"q": [0.0, 1.0, 0.0, 0.0], "t": [0.25, -0.35, 0.15]},
        "db_dir": None,
    }


def _merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_config(out[key], value)
        else:
            out[key] = value
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _rot(axis: str, angle: float) -> UnitQuaternion:
    v = {"x": Vec3(angle, 0, 0), "y": Vec3(0, angle, 0), "z": Vec3(0, 0, angle)}[axis]
    return geom3.rodrigues_exp(v)


_FACE_ORIENTATIONS = {
    "box": (("x", 0.0), ("x", math.pi / 2), ("y", math.pi / 2)),
    "lshape": (("x", 0.0), ("x", math.pi / 2), ("y", math.pi / 2)),
    "cylinder": (("x", 0.0), ("x", math.pi / 2), ("y", math.pi / 2)),
}


def _orientations_for(obj_cfg: dict, count: int | None = None) -> list:
    """Resting orientations for an object config; optionally restricted by an
    explicit ``orientations`` index list."""
    all_orients = _FACE_ORIENTATIONS[obj_cfg["kind"]]
    indices = obj_cfg.get("orientations")
    if indices is None:
        indices = list(range(len(all_orients)))
    if count is not None:
        indices = indices[:count]
    return [_rot(*all_orients[i]) for i in indices]


# --- Pipeline stages -------------------------------------------------------------

def _make_camera(d: dict) -> calib.CameraIntrinsics:
    return calib.CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                                  skew=d.get("skew", 0.0),
                                  k1=d.get("k1", 0.0), k2=d.get("k2", 0.0))


def _board_poses(n_views: int, rng) -> list:
    """Varied board-to-camera poses: strong alternating tilts and a sweep
    across the field of view keep the intrinsics well conditioned."""
    poses = []
    for i in range(n_views):
        tilt_x = math.radians(rng.uniform(18.0, 40.0)) * (1 if i % 2 == 0 else -1)
        tilt_y = math.radians(rng.uniform(18.0, 40.0)) * (1 if (i // 2) % 2 == 0 else -1)
        spin = math.radians(rng.uniform(-45.0, 45.0))
        q = _rot("z", spin).multiply(_rot("y", tilt_y)).multiply(_rot("x", tilt_x))
        t = Vec3(rng.uniform(-0.28, 0.08), rng.uniform(-0.22, 0.06),
                 rng.uniform(0.45, 0.75))
        poses.append(Pose(q, t))
    return poses


def _synth_views(k_true, board_pts, poses, noise_px, rng) -> list:
    k_arr = np.array([k_true.fx, k_true.fy, k_true.cx, k_true.cy,
                      k_true.skew, k_true.k1, k_true.k2])
    views = []
    for pose in poses:
        px = calib._project_view(k_arr, pose.rotation.to_matrix(),
                                 pose.translation.to_array(), board_pts)
        if noise_px > 0.0:
            px = px + rng.normal(0.0, noise_px, px.shape)
        views.append(calib.PlanarView(board_pts, px))
    return views


def _stage_calibration(cfg: dict, rng) -> tuple[dict, calib.CameraIntrinsics]:
    cal = cfg["calibration"]
    board = cal["board"]
    board_pts = calib.board_object_points(board["cols"], board["rows"],
                                          board["square_size_m"])
    k_color = _make_camera(cfg["cameras"]["color"])
    k_ir = _make_camera(cfg["cameras"]["ir"])
    rig_rot = [math.radians(a) for a in cfg["cameras"]["rig_rot_deg"]]
    rig = Pose(_rot("x", rig_rot[0]).multiply(_rot("y", rig_rot[1]))
               .multiply(_rot("z", rig_rot[2])),
               Vec3(*cfg["cameras"]["rig_trans_m"]))

    poses_a = _board_poses(cal["views"], rng)
    poses_b = [geom3.compose(geom3.invert(rig), p) for p in poses_a]
    out = {}
    est_pairs = []
    per_cam_poses = {}
    for name, k_true, poses in (("color", k_color, poses_a), ("ir", k_ir, poses_b)):
        views = _synth_views(k_true, board_pts, poses, cal["corner_noise_px"], rng)
        k_est, poses_est, rms = calib.calibrate_planar(views)
        per_cam_poses[name] = poses_est
        out[name] = {
            "intrinsics_true": k_true.to_dict(),
            "intrinsics_est": k_est.to_dict(),
            "rms_px": rms,
            "max_rel_err": max(abs(getattr(k_est, f) - getattr(k_true, f))
                               / abs(getattr(k_true, f))
                               for f in ("fx", "fy", "cx", "cy")),
        }
        if name == "color":
            k_color_est = k_est
    est_pairs = list(zip(per_cam_poses["color"], per_cam_poses["ir"]))
    stereo = calib.stereo_extrinsic(est_pairs)
    rot_err, trans_err = geom3.pose_error(stereo.cam_b_to_cam_a, rig)
    out["stereo"] = {
        "true": geom3.pose_to_dict(rig),
        "est": geom3.pose_to_dict(stereo.cam_b_to_cam_a),
        "rot_err_rad": rot_err,
        "trans_err_m": trans_err,
        "max_rot_disagreement": stereo.max_rot_disagreement,
        "max_trans_disagreement": stereo.max_trans_disagreement,
    }
    return out, k_color_est


def _stage_depth_check(cfg: dict, rng) -> dict:
    dc = cfg["depth_check"]
    ws = cfg["workspace"]
    n = int(dc["points"])
    half = ws["table_half_extent_m"]
    cx, cy = ws["center"]
    pts = np.column_stack([
        rng.uniform(cx - half, cx + half, n),
        rng.uniform(cy - half, cy + half, n),
        np.full(n, dc["bias_m"]) + rng.normal(0.0, dc["noise_m"], n),
    ])
    cloud = PointCloud(pts, frame=FRAME_ROBOT_BASE)
    mean, rms, mx = calib.depth_deviation(cloud, (np.array([0.0, 0.0, 1.0]), 0.0))
    return {"injected_bias_m": dc["bias_m"], "noise_m": dc["noise_m"],
            "points": n, "mean_m": mean, "rms_m": rms, "max_m": mx}


def _camera_pose(cfg: dict) -> Pose:
    ws = cfg["workspace"]
    cx, cy = ws["center"]
    # Overhead camera looking straight down: x -> x, y -> -y, z -> -z.
    return Pose(_rot("x", math.pi), Vec3(cx, cy, ws["camera_height_m"]))


def _stage_handeye(cfg: dict, rng, k_est: calib.CameraIntrinsics) -> tuple[dict, Pose]:
    he = cfg["handeye"]
    x_true = _camera_pose(cfg)
    y_true = Pose(UnitQuaternion.identity(), Vec3(0.0, 0.0, 0.06))
    spec = handeye.MarkerSpec(he["marker_side_m"])
    k_true = _make_camera(cfg["cameras"]["color"])
    k_arr = np.array([k_true.fx, k_true.fy, k_true.cx, k_true.cy,
                      k_true.skew, k_true.k1, k_true.k2])
    ws = cfg["workspace"]
    cx, cy = ws["center"]

    samples = []
    prev_q = None
    attempts = 0
    while len(samples) < int(he["stations"]):
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("could not sample enough valid hand-eye stations")
        tilt_axis = rng.normal(size=3)
        tilt_axis[2] *= 0.3
        tilt_axis /= np.linalg.norm(tilt_axis)
        tilt = rng.uniform(0.15, 0.5)
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        q = _rot("z", yaw).multiply(
            geom3.rodrigues_exp(Vec3.from_array(tilt_axis * tilt)))
        if prev_q is not None:
            rel = q.multiply(prev_q.conjugate()).angle()
            if not (0.05 < rel < 2.6):
                continue
        t = Vec3(cx + rng.uniform(-0.15, 0.15), cy + rng.uniform(-0.15, 0.15),
                 rng.uniform(0.25, 0.5))
        base_to_ee = Pose(q, t)
        if he["ee_rot_noise_deg"] > 0.0 or he["ee_trans_noise_m"] > 0.0:
            dq = geom3.rodrigues_exp(Vec3.from_array(
                rng.normal(0.0, math.radians(he["ee_rot_noise_deg"]), 3)))
            dt = rng.normal(0.0, he["ee_trans_noise_m"], 3)
            base_to_ee_obs = Pose(dq.multiply(q), Vec3.from_array(t.to_array() + dt))
        else:
            base_to_ee_obs = base_to_ee
        cam_to_marker = geom3.compose(geom3.invert(x_true),
                                      geom3.compose(base_to_ee, y_true))
        corners_cam = cam_to_marker.apply(spec.corners())
        if np.any(corners_cam[:, 2] < 0.1):
            continue
        px = calib._project_view(k_arr, cam_to_marker.rotation.to_matrix(),
                                 cam_to_marker.translation.to_array(), spec.corners())
        if he["corner_noise_px"] > 0.0:
            px = px + rng.normal(0.0, he["corner_noise_px"], px.shape)
        est_marker, _pnp_rms = handeye.marker_pnp(k_est, spec, px)
        samples.append(handeye.StationSample(base_to_ee_obs, est_marker))
        prev_q = q

    result = handeye.calibrate_eye_to_hand(samples)
    rot_err, trans_err = geom3.pose_error(result.base_to_camera, x_true)
    return ({"stations": len(samples),
             "true_base_to_camera": geom3.pose_to_dict(x_true),
             "result": result.to_dict(),
             "rot_err_rad": rot_err,
             "trans_err_m": trans_err},
            result.base_to_camera)


def _resting_pose(base_cloud: PointCloud, orientation: UnitQuaternion,
                  xy, yaw: float) -> Pose:
    """Pose with the given orientation (plus yaw) and the shape bottom on z=0."""
    q = _rot("z", yaw).multiply(orientation)
    rotated = q.rotate(base_cloud.points)
    z_lift = -float(rotated[:, 2].min())
    return Pose(q, Vec3(xy[0], xy[1], z_lift))


def _table_cloud(cfg: dict, rng) -> PointCloud:
    ws = cfg["workspace"]
    cx, cy = ws["center"]
    half = ws["table_half_extent_m"]
    area = (2 * half) ** 2
    n = max(1, int(round(area * ws["table_density"])))
    pts = np.column_stack([rng.uniform(cx - half, cx + half, n),
                           rng.uniform(cy - half, cy + half, n),
                           np.zeros(n)])
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    return PointCloud(pts, nrm, frame=FRAME_ROBOT_BASE)


def _grazing_filter(cloud: PointCloud, camera_pose: Pose, min_cos: float) -> PointCloud:
    """Drop points the camera sees at grazing incidence.

    Back-face culling alone keeps whole vertical faces as soon as the object
    sits off the camera axis (the simulator casts no rays); a real depth
    camera returns nothing that oblique. Applied identically to taught and
    scanned views.
    """
    if min_cos <= 0.0 or cloud.normals is None:
        return cloud
    rays = camera_pose.translation.to_array() - cloud.points
    rays /= np.linalg.norm(rays, axis=1)[:, None]
    keep = np.einsum("ni,ni->n", cloud.normals, rays) > min_cos
    return PointCloud(cloud.points[keep], cloud.normals[keep], cloud.frame)


def _render_scene(cfg: dict, base_cloud: PointCloud, object_pose: Pose,
                  camera_pose: Pose, hand_eye_est: Pose, noise_seed: int,
                  table_seed: int) -> PointCloud:
    """Camera-facing object + table view, camera-frame roundtrip, crop."""
    ws = cfg["workspace"]
    sigma = cfg["cloud_noise_m"]
    min_cos = ws.get("min_view_cos", 0.0)
    obj_view = simulate_view(base_cloud, ViewSpec(object_pose, camera_pose,
                                                  sigma, "camera_facing", noise_seed))
    obj_view = _grazing_filter(obj_view, camera_pose, min_cos)
    table = _table_cloud(cfg, np.random.default_rng(table_seed))
    table_view = simulate_view(table, ViewSpec(Pose.identity(), camera_pose,
                                               sigma, "camera_facing", table_seed + 1))
    scene = concat_clouds(obj_view, table_view)
    # The depth camera reports in its own frame; bring the cloud back to the
    # base frame through the *estimated* hand-eye transform, as a real system
    # would have to.
    x_true = camera_pose
    cam_frame = scene.transformed(geom3.invert(x_true)).with_frame(geom3.FRAME_CAMERA)
    base_est = cam_frame.transformed(hand_eye_est).with_frame(FRAME_ROBOT_BASE)
    cx, cy = ws["center"]
    margin = ws["crop_margin_m"]
    box = Aabb(np.array([cx - margin, cy - margin, ws["crop_z_min_m"]]),
               np.array([cx + margin, cy + margin, ws["crop_z_max_m"]]))
    cropped = crop_aabb(base_est, box)
    if cfg["voxel_size_m"] > 0.0:
        cropped = voxel_downsample(cropped, cfg["voxel_size_m"])
    return cropped


def _grasp_for(object_pose: Pose, base_cloud: PointCloud) -> Pose:
    """Top-center grasp, tool z pointing straight down."""
    placed = object_pose.apply(base_cloud.points)
    top = float(placed[:, 2].max())
    center = placed.mean(axis=0)
    return Pose(_rot("x", math.pi), Vec3(center[0], center[1], top))


def _stage_teaching(cfg: dict, rng, hand_eye_est: Pose,
                    db: graspdb.GraspDatabase) -> tuple[dict, dict]:
    camera_pose = _camera_pose(cfg)
    ws = cfg["workspace"]
    out = {"objects": []}
    truth = {}
    for obj_cfg in cfg["objects"]:
        spec = ShapeSpec(obj_cfg["kind"], tuple(obj_cfg["dims"]),
                         cfg["sample_density"])
        base_cloud = synth_cloud(spec, seed=int(rng.integers(2**31)))
        orientations = _orientations_for(obj_cfg, obj_cfg.get("faces", 3))
        entry = {"object_id": obj_cfg["object_id"], "faces": []}
        face_truth = []
        for orientation in orientations:
            teach_pose = _resting_pose(base_cloud, orientation, ws["center"], 0.0)
            scene = _render_scene(cfg, base_cloud, teach_pose, camera_pose,
                                  hand_eye_est, int(rng.integers(2**31)),
                                  int(rng.integers(2**31)))
            grasp = _grasp_for(teach_pose, base_cloud)
            face_id = graspdb.register_face(db, obj_cfg["object_id"], scene,
                                            grasp, obj_cfg.get("gripper", "two_finger"))
            entry["faces"].append({"face_id": face_id, "points": len(scene),
                                   "grasp": geom3.pose_to_dict(grasp)})
            face_truth.append({"face_id": face_id, "teach_pose": teach_pose,
                               "orientation": orientation, "grasp": grasp})
        out["objects"].append(entry)
        truth[obj_cfg["object_id"]] = {"base_cloud": base_cloud, "faces": face_truth}
    return out, truth


def _stage_scenes(cfg: dict, rng, hand_eye_est: Pose, db: graspdb.GraspDatabase,
                  truth: dict) -> list:
    camera_pose = _camera_pose(cfg)
    ws = cfg["workspace"]
    icp_params = register.IcpParams.from_dict(cfg["icp"])
    place_pose = geom3.pose_from_dict(cfg["place_pose"])
    offset = cfg["approach_offset_m"]
    scenes = []

    scene_defs = []
    for obj_cfg in cfg["objects"]:
        for _ in range(int(cfg["scenes_per_object"])):
            scene_defs.append(("registered", obj_cfg))
    for unreg_cfg in cfg["unregistered"]:
        for _ in range(int(cfg["unregistered_scenes"])):
            scene_defs.append(("unregistered", unreg_cfg))

    unreg_clouds = {}
    for kind, obj_cfg in scene_defs:
        index = len(scenes)
        if kind == "registered":
            object_id = obj_cfg["object_id"]
            base_cloud = truth[object_id]["base_cloud"]
            faces = truth[object_id]["faces"]
            face_idx = int(rng.integers(len(faces)))
            orientation = faces[face_idx]["orientation"]
            teach = faces[face_idx]
        else:
            object_id = obj_cfg.get("object_id", f"unregistered_{obj_cfg['kind']}")
            if object_id not in unreg_clouds:
                spec = ShapeSpec(obj_cfg["kind"], tuple(obj_cfg["dims"]),
                                 cfg["sample_density"])
                unreg_clouds[object_id] = synth_cloud(spec, seed=int(rng.integers(2**31)))
            base_cloud = unreg_clouds[object_id]
            ors = _orientations_for(obj_cfg)
            orientation = ors[int(rng.integers(len(ors)))]
            teach = None
        yaw = float(rng.uniform(0.0, 2.0 * math.pi))
        off = ws["scene_offset_m"]
        xy = (ws["center"][0] + float(rng.uniform(-off, off)),
              ws["center"][1] + float(rng.uniform(-off, off)))
        scene_pose = _resting_pose(base_cloud, orientation, xy, yaw)
        scene_cloud = _render_scene(cfg, base_cloud, scene_pose, camera_pose,
                                    hand_eye_est, int(rng.integers(2**31)),
                                    int(rng.integers(2**31)))
        record = {
            "index": index,
            "object_id": object_id,
            "expected_registered": kind == "registered",
            "points": len(scene_cloud),
            "truth": {"object_pose": geom3.pose_to_dict(scene_pose)},
            "matched": False,
            "match": None,
            "grasp_error_rot_rad": None,
            "grasp_error_trans_m": None,
            "plan": None,
            "error": None,
        }
        if teach is not None:
            # True alignment maps the taught cloud onto this scene; the true
            # grasp is that motion applied to the taught grasp.
            true_align = geom3.compose(scene_pose, geom3.invert(teach["teach_pose"]))
            true_grasp = geom3.compose(true_align, teach["grasp"])
            record["truth"]["alignment"] = geom3.pose_to_dict(true_align)
            record["truth"]["grasp"] = geom3.pose_to_dict(true_grasp)
        try:
            match = graspdb.match_object(db, scene_cloud, icp_params,
                                         cfg["accept_threshold"])
        except graspdb.NoMatch as err:
            record["error"] = f"NoMatch: {err}"
            scenes.append(record)
            continue
        record["matched"] = True
        record["match"] = match.to_dict()
        if teach is not None:
            rot_err, trans_err = geom3.pose_error(
                match.grasp_in_scene, geom3.pose_from_dict(record["truth"]["grasp"]))
            record["grasp_error_rot_rad"] = rot_err
            record["grasp_error_trans_m"] = trans_err
        plan = plan_pick_place(match.grasp_in_scene, place_pose, offset)
        record["plan"] = plan.to_dict()
        scenes.append(record)
    return scenes


def run_pipeline(config: dict | None = None) -> dict:
    """Simulated end-to-end run; returns the report dict.

    Stage order: calibration, depth check, hand-eye, face teaching, random
    scenes (match + grasp transfer + plan). Every declared report field is
    present even on failure; a hard stage failure raises
    :class:`PipelineStageError` carrying the partial report.
    """
    cfg = _merge_config(default_demo_config(), config or {})
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": cfg["seed"],
        "config": _jsonable(cfg),
        "calibration": None,
        "depth_check": None,
        "handeye": None,
        "teaching": None,
        "scenes": None,
        "summary": None,
        "error": None,
    }
    rng = np.random.default_rng(cfg["seed"])
    db = graspdb.GraspDatabase()

    def fail(stage: str, err: Exception):
        report["error"] = f"{stage}: {err}"
        _summarize(report)
        raise PipelineStageError(stage, err, _jsonable(report))

    try:
        report["calibration"], k_est = _stage_calibration(cfg, rng)
    except Exception as err:  # noqa: BLE001 - stage boundary
        fail("calibration", err)
    try:
        report["depth_check"] = _stage_depth_check(cfg, rng)
    except Exception as err:
        fail("depth_check", err)
    try:
        report["handeye"], hand_eye_est = _stage_handeye(cfg, rng, k_est)
    except Exception as err:
        fail("handeye", err)
    try:
        report["teaching"], truth = _stage_teaching(cfg, rng, hand_eye_est, db)
    except Exception as err:
        fail("teaching", err)
    try:
        report["scenes"] = _stage_scenes(cfg, rng, hand_eye_est, db, truth)
    except Exception as err:
        fail("scenes", err)
    if cfg.get("db_dir"):
        graspdb.save_db(db, cfg["db_dir"])
    _summarize(report)
    return _jsonable(report)


def _summarize(report: dict) -> None:
    scenes = report.get("scenes") or []
    matched = sum(1 for s in scenes if s["matched"])
    planned = sum(1 for s in scenes if s["plan"] is not None)
    report["summary"] = {
        "scenes_total": len(scenes),
        "scenes_matched": matched,
        "scenes_planned": planned,
        "all_scenes_planned": bool(scenes) and planned == len(scenes),
        "failed_stage": report["error"].split(":", 1)[0] if report["error"] else None,
    }
