"""Rigid alignment of a taught (registered) cloud onto a scanned cloud.

The matcher is deliberately deterministic: PCA coarse alignment proposes up
to four axis-sign hypotheses, each is polished with gated ICP, and the best
result wins by fitness, then lower inlier rmse, then hypothesis index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom3
from .cloud import DegenerateGeometry, KdTree, PointCloud
from .geom3 import Pose

POINT_TO_POINT = "point_to_point"
POINT_TO_PLANE = "point_to_plane"


class LengthMismatch(ValueError):
    pass


class NoCorrespondences(RuntimeError):
    """No source point found a gated target neighbor at the initial pose."""


class MissingNormals(ValueError):
    pass


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 60
    max_correspondence_dist: float = 0.02
    convergence_delta_rmse: float = 1e-6
    variant: str = POINT_TO_POINT

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.max_correspondence_dist > 0.0:
            raise ValueError("max_correspondence_dist must be > 0")
        if not self.convergence_delta_rmse > 0.0:
            raise ValueError("convergence_delta_rmse must be > 0")
        if self.variant not in (POINT_TO_POINT, POINT_TO_PLANE):
            raise ValueError(f"unknown ICP variant {self.variant!r}")

    def to_dict(self) -> dict:
        return {"max_iterations": self.max_iterations,
                "max_correspondence_dist": self.max_correspondence_dist,
                "convergence_delta_rmse": self.convergence_delta_rmse,
                "variant": self.variant}

    @classmethod
    def from_dict(cls, d: dict) -> "IcpParams":
        return cls(**{k: d[k] for k in
                      ("max_iterations", "max_correspondence_dist",
                       "convergence_delta_rmse", "variant") if k in d})


@dataclass(frozen=True)
class AlignmentResult:
    """Outcome of an alignment; ``transform`` maps the registered cloud onto
    the scanned cloud.

    ``rmse_history`` holds the per-iteration value of the objective the loop
    minimizes: rms over all source points of the gate-clamped nearest
    neighbor distance. For point_to_point this sequence is non-increasing by
    construction. ``inlier_rmse`` is the final rms over gated inliers only.
    """

    transform: Pose
    fitness: float
    inlier_rmse: float
    iterations: int
    converged: bool
    rmse_history: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"transform": geom3.pose_to_dict(self.transform),
                "fitness": self.fitness,
                "inlier_rmse": self.inlier_rmse,
                "iterations": self.iterations,
                "converged": self.converged,
                "rmse_history": list(self.rmse_history)}


def umeyama_fit(src, dst) -> Pose:
    """Least-squares rigid transform (no scale) minimizing sum |T(src) - dst|^2.

    Cross-covariance SVD with a determinant guard, so the result is always a
    proper rotation even for reflected configurations.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise LengthMismatch(f"src {src.shape} vs dst {dst.shape}")
    if src.ndim != 2 or src.shape[1] != 3 or src.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 correspondences of 3D points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    u, svals, vt = np.linalg.svd(cov)
    if svals[1] <= 1e-12 * max(svals[0], 1e-30):
        raise DegenerateGeometry("correspondences are collinear")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    t = mu_d - r @ mu_s
    return Pose.from_rt(r, t)


def compute_fitness(source: PointCloud, target: PointCloud, t: Pose,
                    gate: float) -> tuple[float, float]:
    """(inlier fraction, rms over inliers) of source under t against target."""
    if not gate > 0.0:
        raise ValueError("gate must be > 0")
    tree = KdTree(target.points)
    return _fitness_with_tree(source.points, tree, t, gate)


def _fitness_with_tree(src_pts: np.ndarray, tree: KdTree, t: Pose,
                       gate: float) -> tuple[float, float]:
    _, dist = tree.query_batch(t.apply(src_pts))
    inliers = dist <= gate
    n_in = int(inliers.sum())
    fitness = n_in / len(src_pts)
    rmse = float(np.sqrt(np.mean(dist[inliers] ** 2))) if n_in else 0.0
    return fitness, rmse


def _point_to_plane_step(src_t: np.ndarray, dst: np.ndarray,
                         normals: np.ndarray) -> Pose:
    """One linearized point-to-plane update (small-angle 6x6 normal equations)."""
    r = np.einsum("ni,ni->n", src_t - dst, normals)
    a = np.hstack([np.cross(src_t, normals), normals])
    h = a.T @ a
    g = a.T @ r
    x = np.linalg.lstsq(h, -g, rcond=None)[0]
    dq = geom3.rodrigues_exp(geom3.Vec3(x[0], x[1], x[2]))
    return Pose(dq, geom3.Vec3(x[3], x[4], x[5]))


def icp(source: PointCloud, target: PointCloud, init: Pose,
        params: IcpParams = IcpParams()) -> AlignmentResult:
    """Gated iterative closest point from a single initial guess.

    Each iteration matches transformed source points to their nearest target
    point, keeps pairs within ``max_correspondence_dist``, and refits either
    the closed-form rigid transform (point_to_point) or one linearized
    point-to-plane update. The loop stops when the clamped rmse improves by
    less than ``convergence_delta_rmse`` or at the iteration cap.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target must be nonempty")
    if params.variant == POINT_TO_PLANE and target.normals is None:
        raise MissingNormals("point_to_plane ICP requires target normals")
    gate = params.max_correspondence_dist
    tree = KdTree(target.points)
    t = init
    history: list[float] = []
    converged = False
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        src_t = t.apply(source.points)
        idx, dist = tree.query_batch(src_t)
        inliers = dist <= gate
        if not inliers.any():
            if it == 1:
                raise NoCorrespondences(
                    f"no source point within gate {gate} m at the initial pose")
            break
        iterations = it
        clamped = np.minimum(dist, gate)
        history.append(float(np.sqrt(np.mean(clamped ** 2))))
        if len(history) >= 2 and history[-2] - history[-1] < params.convergence_delta_rmse:
            converged = True
            break
        if params.variant == POINT_TO_POINT:
            t = umeyama_fit(source.points[inliers], target.points[idx[inliers]])
        else:
            delta = _point_to_plane_step(src_t[inliers], target.points[idx[inliers]],
                                         target.normals[idx[inliers]])
            t = geom3.compose(delta, t)
    fitness, inlier_rmse = _fitness_with_tree(source.points, tree, t, gate)
    return AlignmentResult(t, fitness, inlier_rmse, iterations, converged,
                           tuple(history))


def _pca_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(centroid, right-handed principal axes as columns, major first)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    vals, vecs = np.linalg.eigh(cov)
    if vals[1] <= 1e-18 + 1e-12 * max(vals[2], 0.0):
        raise DegenerateGeometry("cloud is collinear; principal axes undefined")
    axes = vecs[:, ::-1]  # descending variance
    if np.linalg.det(axes) < 0.0:
        axes[:, 2] = -axes[:, 2]
    return centroid, axes


# Axis-sign combinations with det +1: identity plus the three 180-degree
# flips about a principal axis.
_SIGN_HYPOTHESES = (
    np.diag([1.0, 1.0, 1.0]),
    np.diag([1.0, -1.0, -1.0]),
    np.diag([-1.0, 1.0, -1.0]),
    np.diag([-1.0, -1.0, 1.0]),
)


def coarse_align_pca(source: PointCloud, target: PointCloud) -> list[Pose]:
    """Centroid + principal-axes alignment, all four proper axis-sign choices."""
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometry("PCA alignment needs at least 3 points per cloud")
    c_s, ax_s = _pca_frame(source.points)
    c_d, ax_d = _pca_frame(target.points)
    hypotheses = []
    for s in _SIGN_HYPOTHESES:
        r = ax_d @ s @ ax_s.T
        hypotheses.append(Pose.from_rt(r, c_d - r @ c_s))
    return hypotheses


def align_object(registered: PointCloud, scanned: PointCloud,
                 params: IcpParams = IcpParams()) -> AlignmentResult:
    """Multi-start alignment: ICP from every PCA hypothesis, best fitness wins."""
    hypotheses = coarse_align_pca(registered, scanned)
    results = []
    last_err: Exception | None = None
    for i, h in enumerate(hypotheses):
        try:
            results.append((i, icp(registered, scanned, h, params)))
        except (NoCorrespondences, DegenerateGeometry) as err:
            last_err = err
    if not results:
        assert last_err is not None
        raise last_err
    best = min(results, key=lambda ir: (-ir[1].fitness, ir[1].inlier_rmse, ir[0]))
    return best[1]
