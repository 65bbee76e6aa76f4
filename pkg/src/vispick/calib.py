"""Planar camera calibration, pose-from-plane, stereo extrinsic, depth metric.

The pipeline is the classic planar one: per-view homographies (normalized
DLT), closed-form intrinsics from the absolute-conic constraints, per-view
extrinsics, then joint Levenberg-Marquardt refinement of intrinsics,
two-term radial distortion, and all view poses.

Distortion is applied to normalized coordinates before the affine pixel
map: (x, y) -> (x, y) * (1 + k1 r^2 + k2 r^4), then u = fx x + skew y + cx.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom3
from .cloud import PointCloud
from .geom3 import Pose, UnitQuaternion, Vec3


class BehindCamera(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


class InsufficientViews(ValueError):
    pass


class IllConditioned(ValueError):
    pass


class DivergedRefinement(RuntimeError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")

    def to_matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "skew": self.skew, "k1": self.k1, "k2": self.k2}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**{k: float(d[k]) for k in
                      ("fx", "fy", "cx", "cy", "skew", "k1", "k2") if k in d})


@dataclass(frozen=True)
class PlanarView:
    """2D-3D correspondences of one board observation (board frame, z = 0)."""

    object_points: np.ndarray  # (N, 3), z == 0
    image_points: np.ndarray   # (N, 2) pixels

    def __post_init__(self):
        obj = np.ascontiguousarray(np.asarray(self.object_points, dtype=float))
        img = np.ascontiguousarray(np.asarray(self.image_points, dtype=float))
        if obj.ndim != 2 or obj.shape[1] != 3:
            raise ValueError("object_points must have shape (N, 3)")
        if img.ndim != 2 or img.shape[1] != 2:
            raise ValueError("image_points must have shape (N, 2)")
        if obj.shape[0] != img.shape[0]:
            raise ValueError("object/image point counts differ")
        if obj.shape[0] < 4:
            raise ValueError("a planar view needs at least 4 correspondences")
        if np.any(np.abs(obj[:, 2]) > 1e-12):
            raise ValueError("object points must lie in the z=0 board plane")
        obj.setflags(write=False)
        img.setflags(write=False)
        object.__setattr__(self, "object_points", obj)
        object.__setattr__(self, "image_points", img)


def board_object_points(cols: int, rows: int, square_size_m: float) -> np.ndarray:
    """Inner-corner grid of a chessboard, row-major, z = 0."""
    xs, ys = np.meshgrid(np.arange(cols), np.arange(rows))
    pts = np.zeros((cols * rows, 3))
    pts[:, 0] = xs.ravel() * square_size_m
    pts[:, 1] = ys.ravel() * square_size_m
    return pts


def _distort(xn: np.ndarray, yn: np.ndarray, k1: float, k2: float):
    r2 = xn * xn + yn * yn
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    return xn * f, yn * f


def project(k: CameraIntrinsics, cam_point) -> tuple[float, float]:
    """Pinhole projection with radial distortion; camera point must have z > 0."""
    p = np.asarray(cam_point, dtype=float).reshape(3)
    if p[2] <= 1e-9:
        raise BehindCamera(f"point z = {p[2]} is not in front of the camera")
    xn, yn = p[0] / p[2], p[1] / p[2]
    xd, yd = _distort(xn, yn, k.k1, k.k2)
    u = k.fx * xd + k.skew * yd + k.cx
    v = k.fy * yd + k.cy
    return float(u), float(v)


def unproject(k: CameraIntrinsics, pixel, depth: float) -> Vec3:
    """Camera-frame point at the given depth along the (undistorted) pixel ray."""
    u, v = float(pixel[0]), float(pixel[1])
    yd = (v - k.cy) / k.fy
    xd = (u - k.cx - k.skew * yd) / k.fx
    xn, yn = xd, yd
    for _ in range(25):  # fixed-point undistortion; exact when k1 = k2 = 0
        r2 = xn * xn + yn * yn
        f = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
        xn, yn = xd / f, yd / f
    return Vec3(xn * depth, yn * depth, depth)


def _project_view(k_arr: np.ndarray, rot: np.ndarray, t: np.ndarray,
                  obj: np.ndarray) -> np.ndarray:
    """Vectorized projection of board points; k_arr = [fx, fy, cx, cy, skew, k1, k2]."""
    cam = obj @ rot.T + t
    z = cam[:, 2]
    if np.any(z <= 1e-9):
        raise BehindCamera("board point behind the camera during projection")
    xn = cam[:, 0] / z
    yn = cam[:, 1] / z
    xd, yd = _distort(xn, yn, k_arr[5], k_arr[6])
    return np.stack([k_arr[0] * xd + k_arr[4] * yd + k_arr[2],
                     k_arr[1] * yd + k_arr[3]], axis=1)


# --- Homography and closed-form intrinsics -----------------------------------

def _normalizing_similarity(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if dist < 1e-15:
        raise DegenerateConfiguration("correspondence points are coincident")
    s = math.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _assert_not_collinear(pts: np.ndarray, label: str) -> None:
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-9 * svals[0] + 1e-15:
        raise DegenerateConfiguration(f"{label} points are collinear")


def estimate_homography(view: PlanarView) -> np.ndarray:
    """Normalized DLT homography mapping board (x, y) to pixels (u, v)."""
    obj = view.object_points[:, :2]
    img = view.image_points
    _assert_not_collinear(obj, "object")
    _assert_not_collinear(img, "image")
    t_obj = _normalizing_similarity(obj)
    t_img = _normalizing_similarity(img)
    n = obj.shape[0]
    oh = np.hstack([obj, np.ones((n, 1))]) @ t_obj.T
    ih = np.hstack([img, np.ones((n, 1))]) @ t_img.T
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = -oh
    a[0::2, 6:9] = ih[:, 0:1] * oh
    a[1::2, 3:6] = -oh
    a[1::2, 6:9] = ih[:, 1:2] * oh
    _, svals, vt = np.linalg.svd(a)
    if svals[7] <= 1e-12 * svals[0]:
        raise DegenerateConfiguration("correspondences are degenerate (collinear?)")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_img) @ h @ t_obj
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateConfiguration("homography is singular")
    return h


def _conic_row(h: np.ndarray, i: int, j: int) -> np.ndarray:
    return np.array([
        h[0, i] * h[0, j],
        h[0, i] * h[1, j] + h[1, i] * h[0, j],
        h[1, i] * h[1, j],
        h[2, i] * h[0, j] + h[0, i] * h[2, j],
        h[2, i] * h[1, j] + h[1, i] * h[2, j],
        h[2, i] * h[2, j],
    ])


def zhang_intrinsics(homographies: list) -> CameraIntrinsics:
    """Closed-form intrinsics from >= 3 board homographies (distortion left 0)."""
    if len(homographies) < 3:
        raise InsufficientViews(f"need >= 3 views, got {len(homographies)}")
    rows = []
    for h in homographies:
        h = np.asarray(h, dtype=float)
        rows.append(_conic_row(h, 0, 1))
        rows.append(_conic_row(h, 0, 0) - _conic_row(h, 1, 1))
    v = np.array(rows)
    _, svals, vt = np.linalg.svd(v)
    # b is determined up to scale: the solution needs 5 well-separated
    # constraint directions; parallel boards collapse the fifth.
    if svals[4] <= 1e-12 * svals[0]:
        raise IllConditioned("board orientations do not constrain the intrinsics "
                             "(condition number above 1e12)")
    b = vt[-1]
    b11, b12, b22, b13, b23, b33 = b
    conic = np.array([[b11, b12, b13], [b12, b22, b23], [b13, b23, b33]])
    if b11 < 0.0:
        conic = -conic
    try:
        m = np.linalg.inv(conic)
    except np.linalg.LinAlgError as err:
        raise IllConditioned("absolute-conic estimate is singular") from err
    if abs(m[2, 2]) < 1e-18:
        raise IllConditioned("absolute-conic estimate is degenerate")
    m = m / m[2, 2]
    # m == K K^T for upper-triangular K with unit bottom-right entry.
    cx, cy = m[0, 2], m[1, 2]
    fy2 = m[1, 1] - cy * cy
    if fy2 <= 0.0:
        raise IllConditioned("conic inverse is not a valid K K^T product")
    fy = math.sqrt(fy2)
    skew = (m[0, 1] - cx * cy) / fy
    fx2 = m[0, 0] - cx * cx - skew * skew
    if fx2 <= 0.0:
        raise IllConditioned("conic inverse is not a valid K K^T product")
    return CameraIntrinsics(math.sqrt(fx2), fy, cx, cy, skew=skew)


def extrinsics_from_homography(k: CameraIntrinsics, h: np.ndarray) -> Pose:
    """Board-to-camera pose from a homography (board plane z = 0)."""
    h = np.asarray(h, dtype=float)
    try:
        m = np.linalg.solve(k.to_matrix(), h)
    except np.linalg.LinAlgError as err:
        raise IllConditioned("intrinsic matrix is singular") from err
    n1, n2 = np.linalg.norm(m[:, 0]), np.linalg.norm(m[:, 1])
    if n1 < 1e-12 or n2 < 1e-12:
        raise IllConditioned("homography columns collapse under K^-1")
    lam = 2.0 / (n1 + n2)
    if lam * m[2, 2] < 0.0:
        lam = -lam  # board origin must sit in front of the camera
    r1 = lam * m[:, 0]
    r2 = lam * m[:, 1]
    t = lam * m[:, 2]
    r0 = np.stack([r1, r2, np.cross(r1, r2)], axis=1)
    u, _, vt = np.linalg.svd(r0)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, 2] = -u[:, 2]
        r = u @ vt
    return Pose.from_rt(r, t)


# --- Joint refinement ---------------------------------------------------------

_REL_COST_TOL = 1e-10
_MAX_LM_ITERATIONS = 200
_MAX_ESCALATIONS = 10


def _pack(k: CameraIntrinsics, poses: list) -> np.ndarray:
    x = [k.fx, k.fy, k.cx, k.cy, k.k1, k.k2]
    for p in poses:
        rv = geom3.rodrigues_log(p.rotation)
        t = p.translation
        x += [rv.x, rv.y, rv.z, t.x, t.y, t.z]
    return np.array(x)


def _unpack(x: np.ndarray, skew: float) -> tuple[CameraIntrinsics, list]:
    k = CameraIntrinsics(x[0], x[1], x[2], x[3], skew=skew, k1=x[4], k2=x[5])
    poses = []
    for i in range(6, len(x), 6):
        q = geom3.rodrigues_exp(Vec3(x[i], x[i + 1], x[i + 2]))
        poses.append(Pose(q, Vec3(x[i + 3], x[i + 4], x[i + 5])))
    return k, poses


def _residual_blocks(x: np.ndarray, skew: float, views: list) -> list:
    k_arr = np.array([x[0], x[1], x[2], x[3], skew, x[4], x[5]])
    blocks = []
    for vi, view in enumerate(views):
        base = 6 + 6 * vi
        q = geom3.rodrigues_exp(Vec3(x[base], x[base + 1], x[base + 2]))
        proj = _project_view(k_arr, q.to_matrix(), x[base + 3:base + 6],
                             view.object_points)
        blocks.append((proj - view.image_points).ravel())
    return blocks


def refine_reprojection(views: list, k0: CameraIntrinsics,
                        poses0: list) -> tuple[CameraIntrinsics, list, float]:
    """Levenberg-Marquardt over intrinsics, k1/k2, and all view poses.

    Returns (refined intrinsics, refined board-to-camera poses, rms) where
    rms is the per-component root-mean-square reprojection residual in
    pixels. Accepted steps only ever lower the cost, so the final rms never
    exceeds the initial one.
    """
    if len(views) != len(poses0):
        raise ValueError("one initial pose per view required")
    if not views:
        raise EmptyInput("no views to refine")
    skew = k0.skew
    x = _pack(k0, poses0)
    n_res = sum(2 * v.object_points.shape[0] for v in views)

    def eval_res(xv: np.ndarray) -> np.ndarray:
        return np.concatenate(_residual_blocks(xv, skew, views))

    res = eval_res(x)
    cost = float(res @ res)
    lam = 1e-3
    for _ in range(_MAX_LM_ITERATIONS):
        jac = _numeric_jacobian(x, skew, views, res)
        grad = jac.T @ res
        hess = jac.T @ jac
        diag = np.diag_indices_from(hess)
        escalations = 0
        accepted = False
        converged = False
        while True:
            damped = hess.copy()
            damped[diag] += lam * np.maximum(hess[diag], 1e-12)
            try:
                step = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(damped, -grad, rcond=None)[0]
            x_new = x + step
            try:
                res_new = eval_res(x_new)
            except (BehindCamera, geom3.AngleNearPi):
                res_new = None
            cost_new = float(res_new @ res_new) if res_new is not None else math.inf
            improvement = cost - cost_new
            if improvement > 0.0:
                x, res, cost = x_new, res_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                accepted = True
                if improvement < _REL_COST_TOL * max(cost, 1e-30):
                    converged = True
                break
            if -improvement <= _REL_COST_TOL * max(cost, 1e-30) + 1e-24:
                converged = True  # at a fixed point; keep the current estimate
                break
            lam *= 10.0
            escalations += 1
            if escalations >= _MAX_ESCALATIONS:
                raise DivergedRefinement(
                    f"cost increased across {escalations} consecutive damping "
                    f"escalations (cost {cost:.6e})")
        if converged or not accepted:
            break
    k, poses = _unpack(x, skew)
    rms = math.sqrt(cost / n_res)
    return k, poses, rms


def _numeric_jacobian(x: np.ndarray, skew: float, views: list,
                      res: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian, exploiting the block structure: pose
    parameters of view i only touch view i's residuals."""
    blocks = _residual_blocks(x, skew, views)
    sizes = [b.size for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    jac = np.zeros((res.size, x.size))
    sqrt_eps = math.sqrt(np.finfo(float).eps)
    for p in range(6):  # shared intrinsics touch every view
        h = sqrt_eps * max(1.0, abs(x[p]))
        xp = x.copy()
        xp[p] += h
        pert = np.concatenate(_residual_blocks(xp, skew, views))
        jac[:, p] = (pert - res) / h
    for vi, view in enumerate(views):
        base = 6 + 6 * vi
        lo, hi = offsets[vi], offsets[vi + 1]
        for p in range(base, base + 6):
            xp = np.concatenate([x[:6], x[base:base + 6]])
            h = sqrt_eps * max(1.0, abs(x[p]))
            xp[6 + p - base] += h
            block = _residual_blocks(xp, skew, [view])[0]
            jac[lo:hi, p] = (block - blocks[vi]) / h
    return jac


def calibrate_planar(views: list) -> tuple[CameraIntrinsics, list, float]:
    """Full planar pipeline: homographies -> closed form -> refinement.

    The refinement holds skew fixed, so the closed-form skew estimate (pure
    noise for modern sensors, and biased when distortion is present) is
    zeroed before refining.
    """
    homographies = [estimate_homography(v) for v in views]
    k0 = zhang_intrinsics(homographies)
    k0 = CameraIntrinsics(k0.fx, k0.fy, k0.cx, k0.cy, skew=0.0)
    poses0 = [extrinsics_from_homography(k0, h) for h in homographies]
    return refine_reprojection(views, k0, poses0)


# --- Stereo extrinsic and depth metric ---------------------------------------

@dataclass(frozen=True)
class StereoExtrinsicResult:
    cam_b_to_cam_a: Pose
    max_rot_disagreement: float    # radians, worst pair vs the average
    max_trans_disagreement: float  # meters


def _quaternion_mean(quats: list) -> UnitQuaternion:
    m = np.zeros((4, 4))
    for q in quats:
        v = np.array([q.w, q.x, q.y, q.z])
        m += np.outer(v, v)
    vals, vecs = np.linalg.eigh(m)
    q = vecs[:, np.argmax(vals)]
    return UnitQuaternion.normalized(q[0], q[1], q[2], q[3])


def stereo_extrinsic(pairs: list) -> StereoExtrinsicResult:
    """Average camB-to-camA transform from per-view (board->camA, board->camB)."""
    if not pairs:
        raise EmptyInput("no pose pairs given")
    rel = [geom3.compose(a, geom3.invert(b)) for a, b in pairs]
    if len(rel) == 1:
        return StereoExtrinsicResult(rel[0], 0.0, 0.0)
    q = _quaternion_mean([p.rotation for p in rel])
    t = np.mean([p.translation.to_array() for p in rel], axis=0)
    mean = Pose(q, Vec3.from_array(t))
    devs = [geom3.pose_error(p, mean) for p in rel]
    return StereoExtrinsicResult(mean,
                                 max(d[0] for d in devs),
                                 max(d[1] for d in devs))


def depth_deviation(measured: PointCloud,
                    reference_plane: tuple) -> tuple[float, float, float]:
    """(mean, rms, max |.|) of signed orthogonal distances to the plane n.p = d."""
    if len(measured) == 0:
        raise EmptyInput("depth deviation needs a nonempty cloud")
    n, d = reference_plane
    n = np.asarray(n, dtype=float).reshape(3)
    n = n / np.linalg.norm(n)
    signed = measured.points @ n - float(d)
    return (float(signed.mean()),
            float(np.sqrt(np.mean(signed ** 2))),
            float(np.max(np.abs(signed))))
