"""Eye-to-hand calibration: fixed camera, planar marker on the moving arm.

Frame bookkeeping for the fixed-camera configuration, with X = base_to_camera
and Y = ee_to_marker both constant:

    base_to_ee(i) o Y = X o cam_to_marker(i)          (both sides = base_to_marker)

Eliminating Y between stations i and i+1 gives the classic AX = XB with

    A(i) = base_to_ee(i+1) o base_to_ee(i)^-1         (robot motion)
    B(i) = cam_to_marker(i+1) o cam_to_marker(i)^-1   (observed marker motion)

solved here with the two-stage Tsai-Lenz method: a linear least-squares
rotation estimate on the modified Rodrigues vectors, then a stacked linear
system for the translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import calib, geom3
from .geom3 import Pose, UnitQuaternion, Vec3

_MIN_MOTION_ANGLE = 1e-3  # radians; also the axis-parallelism threshold


class TooFewSamples(ValueError):
    pass


class TooFewPairs(ValueError):
    pass


class DegenerateMotions(ValueError):
    pass


@dataclass(frozen=True)
class StationSample:
    base_to_ee: Pose       # robot kinematics
    cam_to_marker: Pose    # marker observation

    def to_dict(self) -> dict:
        return {"base_to_ee": geom3.pose_to_dict(self.base_to_ee),
                "cam_to_marker": geom3.pose_to_dict(self.cam_to_marker)}

    @classmethod
    def from_dict(cls, d: dict) -> "StationSample":
        return cls(geom3.pose_from_dict(d["base_to_ee"]),
                   geom3.pose_from_dict(d["cam_to_marker"]))


@dataclass(frozen=True)
class HandEyeResult:
    base_to_camera: Pose
    ee_to_marker: Pose
    rot_residual: float    # rms AX-vs-XB rotation gap, radians
    trans_residual: float  # rms AX-vs-XB translation gap, meters

    def to_dict(self) -> dict:
        return {"base_to_camera": geom3.pose_to_dict(self.base_to_camera),
                "ee_to_marker": geom3.pose_to_dict(self.ee_to_marker),
                "rot_residual": self.rot_residual,
                "trans_residual": self.trans_residual,
                "frames": {"base": geom3.FRAME_ROBOT_BASE,
                           "camera": geom3.FRAME_CAMERA}}


@dataclass(frozen=True)
class MarkerSpec:
    """Square planar marker; corners counter-clockwise from top-left, z out of
    the marker plane."""

    side_length: float

    def __post_init__(self):
        if not self.side_length > 0.0:
            raise ValueError("side_length must be positive")

    def corners(self) -> np.ndarray:
        h = 0.5 * self.side_length
        return np.array([[-h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0]])


def relative_motions(samples: list, all_pairs: bool = False) -> list:
    """(A, B) motion pairs; consecutive stations by default, every station
    pair with ``all_pairs=True`` (more noise averaging, same unknown X)."""
    if len(samples) < 2:
        raise TooFewSamples("need at least 2 stations to form a motion pair")
    if all_pairs:
        index_pairs = [(i, j) for i in range(len(samples))
                       for j in range(i + 1, len(samples))]
    else:
        index_pairs = [(i, i + 1) for i in range(len(samples) - 1)]
    motions = []
    for i, j in index_pairs:
        a = geom3.compose(samples[j].base_to_ee, geom3.invert(samples[i].base_to_ee))
        b = geom3.compose(samples[j].cam_to_marker, geom3.invert(samples[i].cam_to_marker))
        motions.append((a, b))
    return motions


def _motion_axes(pairs: list) -> np.ndarray:
    """Unit rotation axes of the A motions; rejects out-of-range angles."""
    axes = []
    for a, _ in pairs:
        angle = a.rotation.angle()
        if not (_MIN_MOTION_ANGLE < angle < math.pi - _MIN_MOTION_ANGLE):
            raise DegenerateMotions(
                f"motion rotation angle {angle:.6f} rad outside "
                f"({_MIN_MOTION_ANGLE}, pi - {_MIN_MOTION_ANGLE})")
        rv = geom3.rodrigues_log(a.rotation).to_array()
        axes.append(rv / np.linalg.norm(rv))
    return np.array(axes)


def solve_ax_xb(pairs: list) -> tuple[Pose, float, float]:
    """Tsai-Lenz solve of A X = X B; returns (X, rot rms, trans rms).

    The rotation stage parameterizes X with the modified Rodrigues vector,
    which is singular when X's rotation angle approaches pi (a straight-down
    camera is exactly that). The solve is therefore run against a few seeded
    right-rotations of the unknown, (X S) satisfying A (X S) = (X S)(S^-1 B S),
    and the seed with the smallest residual wins; at least one seed is always
    well clear of the singularity.
    """
    if len(pairs) < 2:
        raise TooFewPairs(f"need >= 2 motion pairs, got {len(pairs)}")
    axes = _motion_axes(pairs)
    cross_norms = [np.linalg.norm(np.cross(axes[i], axes[j]))
                   for i in range(len(axes)) for j in range(i + 1, len(axes))]
    if max(cross_norms) <= math.sin(_MIN_MOTION_ANGLE):
        raise DegenerateMotions("all motion rotation axes are parallel within 1e-3 rad")

    best = None
    for seed in _SOLVE_SEEDS:
        seed_pose = Pose(seed, Vec3(0.0, 0.0, 0.0))
        seeded = [(a, geom3.compose(geom3.invert(seed_pose), geom3.compose(b, seed_pose)))
                  for a, b in pairs]
        x_seeded = _tsai_lenz(seeded)
        x = geom3.compose(x_seeded, geom3.invert(seed_pose))
        residual = _ax_xb_residuals(pairs, x)
        if best is None or residual < best[1]:
            best = (x, residual)
    x, (rot_res, trans_res) = best
    return x, rot_res, trans_res


_SOLVE_SEEDS = (
    UnitQuaternion.identity(),
    geom3.rodrigues_exp(Vec3(math.pi / 2, 0.0, 0.0)),
    geom3.rodrigues_exp(Vec3(0.0, math.pi / 2, 0.0)),
    geom3.rodrigues_exp(Vec3(0.0, 0.0, math.pi / 2)),
)


def _tsai_lenz(pairs: list) -> Pose:
    # Rotation stage: skew(Pa + Pb) p' = Pb - Pa, stacked over pairs.
    lhs = []
    rhs = []
    for a, b in pairs:
        pa = _modified_rodrigues(a.rotation)
        pb = _modified_rodrigues(b.rotation)
        lhs.append(_skew(pa + pb))
        rhs.append(pb - pa)
    p_prime = np.linalg.lstsq(np.vstack(lhs), np.concatenate(rhs), rcond=None)[0]
    p = 2.0 * p_prime / math.sqrt(1.0 + float(p_prime @ p_prime))
    pn2 = float(p @ p)
    r_x = ((1.0 - 0.5 * pn2) * np.eye(3)
           + 0.5 * (np.outer(p, p) + math.sqrt(max(4.0 - pn2, 0.0)) * _skew(p)))

    # Translation stage: (Ra - I) t = Rx tb - ta, stacked over pairs.
    lhs_t = []
    rhs_t = []
    for a, b in pairs:
        ra = a.rotation.to_matrix()
        lhs_t.append(ra - np.eye(3))
        rhs_t.append(r_x @ b.translation.to_array() - a.translation.to_array())
    t_x = np.linalg.lstsq(np.vstack(lhs_t), np.concatenate(rhs_t), rcond=None)[0]
    return Pose.from_rt(r_x, t_x)


def _ax_xb_residuals(pairs: list, x: Pose) -> tuple[float, float]:
    rot_sq = 0.0
    trans_sq = 0.0
    for a, b in pairs:
        dr, dt = geom3.pose_error(geom3.compose(a, x), geom3.compose(x, b))
        rot_sq += dr * dr
        trans_sq += dt * dt
    n = len(pairs)
    return math.sqrt(rot_sq / n), math.sqrt(trans_sq / n)


def _modified_rodrigues(q) -> np.ndarray:
    """2 sin(theta/2) * axis, the Tsai-Lenz rotation encoding."""
    rv = geom3.rodrigues_log(q).to_array()
    theta = np.linalg.norm(rv)
    if theta < 1e-12:
        return rv
    return (2.0 * math.sin(0.5 * theta) / theta) * rv


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def calibrate_eye_to_hand(samples: list, all_pairs: bool = False) -> HandEyeResult:
    """Full eye-to-hand pipeline over recorded stations.

    Returns base_to_camera plus the implied constant ee_to_marker, averaged
    over stations. For every sample, base_to_ee o ee_to_marker agrees with
    base_to_camera o cam_to_marker within the reported residuals.
    """
    if len(samples) < 3:
        raise TooFewSamples(f"need >= 3 stations, got {len(samples)}")
    pairs = relative_motions(samples, all_pairs=all_pairs)
    x, rot_res, trans_res = solve_ax_xb(pairs)
    ys = [geom3.compose(geom3.invert(s.base_to_ee), geom3.compose(x, s.cam_to_marker))
          for s in samples]
    q = calib._quaternion_mean([y.rotation for y in ys])
    t = np.mean([y.translation.to_array() for y in ys], axis=0)
    return HandEyeResult(x, Pose(q, Vec3.from_array(t)), rot_res, trans_res)


def marker_pnp(k: calib.CameraIntrinsics, spec: MarkerSpec,
               corners_px) -> tuple[Pose, float]:
    """Camera-to-marker pose from the 4 marker corners.

    Undistorts the corners, runs homography decomposition for an initial
    pose, then polishes it with a short pose-only LM against the raw pixels.
    Returns (pose, per-component reprojection rms in pixels).
    """
    px = np.asarray(corners_px, dtype=float).reshape(4, 2)
    calib._assert_not_collinear(px, "corner")
    obj = spec.corners()
    und = np.empty_like(px)
    for i, (u, v) in enumerate(px):
        ray = calib.unproject(k, (u, v), 1.0)
        und[i, 0] = k.fx * ray.x + k.skew * ray.y + k.cx
        und[i, 1] = k.fy * ray.y + k.cy
    view = calib.PlanarView(obj, und)
    pose0 = calib.extrinsics_from_homography(k, calib.estimate_homography(view))
    return _refine_pose(k, obj, px, pose0)


def _refine_pose(k, obj: np.ndarray, img_px: np.ndarray,
                 pose0: Pose) -> tuple[Pose, float]:
    k_arr = np.array([k.fx, k.fy, k.cx, k.cy, k.skew, k.k1, k.k2])

    def residuals(x):
        q = geom3.rodrigues_exp(Vec3(x[0], x[1], x[2]))
        proj = calib._project_view(k_arr, q.to_matrix(), x[3:6], obj)
        return (proj - img_px).ravel()

    rv = geom3.rodrigues_log(pose0.rotation)
    x = np.array([rv.x, rv.y, rv.z,
                  pose0.translation.x, pose0.translation.y, pose0.translation.z])
    res = residuals(x)
    cost = float(res @ res)
    lam = 1e-3
    sqrt_eps = math.sqrt(np.finfo(float).eps)
    for _ in range(60):
        jac = np.empty((res.size, 6))
        for p in range(6):
            h = sqrt_eps * max(1.0, abs(x[p]))
            xp = x.copy()
            xp[p] += h
            jac[:, p] = (residuals(xp) - res) / h
        grad = jac.T @ res
        hess = jac.T @ jac
        stop = False
        for _ in range(12):
            damped = hess + lam * np.diag(np.maximum(np.diag(hess), 1e-12))
            step = np.linalg.lstsq(damped, -grad, rcond=None)[0]
            try:
                res_new = residuals(x + step)
            except (calib.BehindCamera, geom3.AngleNearPi):
                lam *= 10.0
                continue
            cost_new = float(res_new @ res_new)
            if cost_new < cost:
                improvement = cost - cost_new
                x, res, cost = x + step, res_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                stop = improvement < 1e-12 * max(cost, 1e-30)
                break
            if cost_new - cost <= 1e-12 * max(cost, 1e-30) + 1e-24:
                stop = True
                break
            lam *= 10.0
        else:
            stop = True
        if stop:
            break
    q = geom3.rodrigues_exp(Vec3(x[0], x[1], x[2]))
    pose = Pose(q, Vec3(x[3], x[4], x[5]))
    return pose, math.sqrt(cost / res.size)
