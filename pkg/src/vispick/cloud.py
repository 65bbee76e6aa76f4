"""Point-cloud container, cropping, spatial search, normals, planes, PLY I/O."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom3 import FRAME_ROBOT_BASE

log = logging.getLogger(__name__)

_NORMAL_TOL = 1e-6


class NonPositiveVoxel(ValueError):
    pass


class EmptyTree(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


class ParseError(ValueError):
    """PLY syntax or consistency error; message names the offending line."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points (meters) with optional unit normals and a frame tag.

    Arrays are float64, shape (N, 3), and are frozen after construction.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    frame: str = FRAME_ROBOT_BASE

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=float))
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            lens = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lens - 1.0) <= _NORMAL_TOL):
                raise ValueError("normals must have unit length within 1e-6")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
        if not self.frame:
            raise ValueError("frame must be nonempty")

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_frame(self, frame: str) -> "PointCloud":
        return PointCloud(self.points, self.normals, frame)

    def transformed(self, pose) -> "PointCloud":
        """Apply a rigid transform; normals get the rotation only."""
        pts = pose.apply(self.points)
        nrm = pose.rotation.rotate(self.normals) if self.normals is not None else None
        return PointCloud(pts, nrm, self.frame)


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box [min, max]."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def infinite(cls) -> "Aabb":
        big = np.full(3, np.finfo(float).max)
        return cls(-big, big)


class KdTree:
    """Spatial index over a cloud's points.

    Backed by scipy's cKDTree for the traversal; single-point queries
    resolve distance ties to the lowest point index so results match an
    exhaustive scan exactly.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("KdTree expects (N, 3) points")
        if pts.shape[0] == 0:
            raise EmptyTree("cannot build a KdTree over zero points")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, query) -> tuple[int, float]:
        """(index, distance) of the nearest point; ties -> lowest index."""
        q = np.asarray(query, dtype=float).reshape(3)
        d0, i0 = self._tree.query(q)
        # Re-rank every candidate in a slightly inflated ball with the same
        # arithmetic the brute-force oracle uses, so ties and last-bit
        # rounding resolve identically.
        r = float(d0) * (1.0 + 1e-12) + 1e-300
        cand = self._tree.query_ball_point(q, r)
        if not cand:
            return int(i0), float(d0)
        cand = np.sort(np.asarray(cand, dtype=int))
        d = np.linalg.norm(self._points[cand] - q, axis=1)
        best = int(np.argmin(d))  # argmin returns the first (lowest) index on ties
        return int(cand[best]), float(d[best])

    def query_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest neighbors: (indices, distances) for (N, 3) queries.

        No tie guarantee; intended for the inner loops of registration.
        """
        d, i = self._tree.query(np.asarray(queries, dtype=float))
        return np.asarray(i, dtype=int), np.asarray(d, dtype=float)

    def query_knn(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Indices (N, k) of the k nearest neighbors of each query point."""
        _, idx = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return np.atleast_2d(idx)


def kd_nearest(tree: KdTree, query) -> tuple[int, float]:
    return tree.nearest(query)


def crop_aabb(c: PointCloud, box: Aabb) -> PointCloud:
    """Keep exactly the points inside the closed box; order untouched."""
    inside = np.all((c.points >= box.min) & (c.points <= box.max), axis=1)
    nrm = c.normals[inside] if c.normals is not None else None
    return PointCloud(c.points[inside], nrm, c.frame)


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, output sorted by voxel index.

    Voxel keys come from the fixed global origin, so the result does not
    depend on the input point order.
    """
    if not voxel > 0.0:
        raise NonPositiveVoxel(f"voxel size must be > 0, got {voxel}")
    if len(c) == 0:
        return c
    keys = np.floor(c.points / voxel).astype(np.int64)
    # Lexicographic sort by (ix, iy, iz); np.lexsort orders by last key first.
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    boundaries = np.ones(len(sk), dtype=bool)
    boundaries[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    group_ids = np.cumsum(boundaries) - 1
    n_groups = int(group_ids[-1]) + 1
    counts = np.bincount(group_ids, minlength=n_groups).astype(float)
    pts = np.empty((n_groups, 3))
    sorted_pts = c.points[order]
    for axis in range(3):
        pts[:, axis] = np.bincount(group_ids, weights=sorted_pts[:, axis], minlength=n_groups)
    pts /= counts[:, None]
    nrm = None
    if c.normals is not None:
        sn = c.normals[order]
        acc = np.empty((n_groups, 3))
        for axis in range(3):
            acc[:, axis] = np.bincount(group_ids, weights=sn[:, axis], minlength=n_groups)
        lens = np.linalg.norm(acc, axis=1)
        # Opposing normals can cancel; fall back to the first member's normal.
        bad = lens < 1e-12
        if np.any(bad):
            firsts = np.flatnonzero(boundaries)
            acc[bad] = sn[firsts[bad]]
            lens = np.linalg.norm(acc, axis=1)
        nrm = acc / lens[:, None]
    return PointCloud(pts, nrm, c.frame)


def estimate_normals(c: PointCloud, k: int, viewpoint) -> PointCloud:
    """Per-point normals from the k-NN covariance, oriented toward viewpoint."""
    if k < 3:
        raise TooFewPoints(f"k must be >= 3, got {k}")
    if len(c) < k:
        raise TooFewPoints(f"cloud has {len(c)} points, need at least k={k}")
    vp = np.asarray(viewpoint, dtype=float).reshape(3)
    tree = KdTree(c.points)
    idx = tree.query_knn(c.points, k)  # (N, k), includes the point itself
    nbrs = c.points[idx]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", vp[None, :] - c.points, normals) < 0.0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return PointCloud(c.points, normals, c.frame)


def fit_plane(c: PointCloud) -> tuple[np.ndarray, float, float]:
    """Total-least-squares plane n.p = d with |n| = 1; returns (n, d, rms).

    Sign convention: d > 0, or (for planes through the origin) the largest
    magnitude normal component positive.
    """
    if len(c) < 3:
        raise DegenerateGeometry("plane fit needs at least 3 points")
    centroid = c.points.mean(axis=0)
    centered = c.points - centroid
    cov = centered.T @ centered / len(c)
    vals, vecs = np.linalg.eigh(cov)
    if vals[1] <= 1e-18 + 1e-12 * max(vals[2], 0.0):
        raise DegenerateGeometry("points are collinear within 1e-9")
    n = vecs[:, 0]
    d = float(n @ centroid)
    if d < -1e-12 or (abs(d) <= 1e-12 and n[np.argmax(np.abs(n))] < 0.0):
        n, d = -n, -d
    rms = float(np.sqrt(np.mean((c.points @ n - d) ** 2)))
    return n, d, rms


# --- PLY persistence ---------------------------------------------------------
#
# Supported grammar (coordinates stored as 32-bit floats):
#   ply
#   format ascii 1.0 | binary_little_endian 1.0
#   element vertex N
#   property float x / y / z [/ nx / ny / nz]
#   end_header
# Unknown vertex properties are skipped with a warning; unknown elements are
# skipped in ASCII and rejected in binary (variable-size rows).

_PLY_SCALARS = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def save_ply(c: PointCloud, path, binary: bool = False) -> None:
    """Write the cloud; ASCII by default for diffability."""
    has_n = c.normals is not None
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(c)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    data = c.points.astype("<f4")
    if has_n:
        data = np.hstack([data, c.normals.astype("<f4")])
    if binary:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(data.tobytes())
    else:
        with open(path, "w") as f:
            f.write("\n".join(header) + "\n")
            for row in data:
                # 17 digits so the float32-quantized value survives the
                # text -> float64 parse bit-exactly
                f.write(" ".join(f"{float(v):.17g}" for v in row) + "\n")


def load_ply(path, frame: str = FRAME_ROBOT_BASE) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()

    # Header is ASCII up to and including the end_header line.
    end_tag = b"end_header"
    pos = raw.find(end_tag)
    if pos < 0:
        raise ParseError(f"{path}: missing end_header")
    header_end = raw.index(b"\n", pos) + 1
    header_lines = raw[:header_end].decode("ascii", errors="replace").splitlines()

    binary = False
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []  # (name, count, [(type, prop)])
    lineno = 0
    for lineno, line in enumerate(header_lines, start=1):
        tok = line.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if lineno == 1:
            if tok != ["ply"]:
                raise ParseError(f"{path}:1: expected 'ply' magic")
            continue
        if tok[0] == "format":
            if tok[1:] == ["ascii", "1.0"]:
                binary = False
            elif tok[1:] == ["binary_little_endian", "1.0"]:
                binary = True
            else:
                raise ParseError(f"{path}:{lineno}: unsupported format {' '.join(tok[1:])}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{path}:{lineno}: malformed element declaration")
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad element count {tok[2]!r}") from None
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"{path}:{lineno}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                if len(tok) != 3:
                    raise ParseError(f"{path}:{lineno}: malformed property")
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            break

    vertex_elems = [e for e in elements if e[0] == "vertex"]
    if not vertex_elems:
        raise ParseError(f"{path}: no vertex element in header")
    _, n_vertices, props = vertex_elems[0]
    prop_names = [p for _, p in props]
    for coord in ("x", "y", "z"):
        if coord not in prop_names:
            raise ParseError(f"{path}: vertex element lacks property {coord!r}")
    has_normals = all(p in prop_names for p in ("nx", "ny", "nz"))
    unknown = [p for p in prop_names if p not in ("x", "y", "z", "nx", "ny", "nz")]
    if unknown:
        log.warning("%s: skipping unknown vertex properties %s", path, unknown)

    want = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
    cols = [prop_names.index(p) for p in want]

    if binary:
        fmt = "<"
        for ptype, _ in props:
            if ptype == "list":
                raise ParseError(f"{path}: list properties unsupported in binary vertex data")
            if ptype not in _PLY_SCALARS:
                raise ParseError(f"{path}: unknown property type {ptype!r}")
            fmt += _PLY_SCALARS[ptype][0]
        row_size = struct.calcsize(fmt)
        body = raw[header_end:]
        needed = row_size * n_vertices
        if len(body) < needed:
            raise ParseError(f"{path}: binary payload truncated "
                             f"({len(body)} bytes, need {needed})")
        rows = [struct.unpack_from(fmt, body, i * row_size) for i in range(n_vertices)]
        table = np.array(rows, dtype=float) if rows else np.zeros((0, len(props)))
    else:
        text_lines = raw[header_end:].decode("ascii", errors="replace").splitlines()
        header_count = len(header_lines)
        values = []
        consumed = 0
        for k in range(n_vertices):
            if consumed >= len(text_lines):
                raise ParseError(f"{path}:{header_count + consumed + 1}: "
                                 f"expected {n_vertices} vertex rows, file ended after {k}")
            line = text_lines[consumed]
            consumed += 1
            tok = line.split()
            if len(tok) != len(props):
                raise ParseError(f"{path}:{header_count + consumed}: expected "
                                 f"{len(props)} values, got {len(tok)}")
            try:
                values.append([float(v) for v in tok])
            except ValueError:
                raise ParseError(f"{path}:{header_count + consumed}: "
                                 f"non-numeric vertex value") from None
        table = np.array(values, dtype=float) if values else np.zeros((0, len(props)))

    pts = table[:, cols[:3]] if len(table) else np.zeros((0, 3))
    nrm = None
    if has_normals and len(table):
        nrm = table[:, cols[3:]]
        lens = np.linalg.norm(nrm, axis=1)
        nrm = nrm / np.where(lens < 1e-12, 1.0, lens)[:, None]
    elif has_normals:
        nrm = np.zeros((0, 3))
    return PointCloud(pts, nrm, frame)
