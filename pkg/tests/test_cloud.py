import math

import numpy as np
import pytest

from vispick import cloud as vc
from vispick.cloud import (Aabb, DegenerateGeometry, EmptyTree, KdTree,
                           NonPositiveVoxel, ParseError, PointCloud,
                           TooFewPoints, crop_aabb, estimate_normals,
                           fit_plane, kd_nearest, load_ply, save_ply,
                           voxel_downsample)


def grid_cloud(n=10):
    """n^3 cell-center grid over the unit cube."""
    c = (np.arange(n) + 0.5) / n
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return PointCloud(np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1))


def brute_nearest(points, q):
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


# --- cropping -----------------------------------------------------------------

def test_crop_infinite_box_keeps_everything():
    c = grid_cloud()
    out = crop_aabb(c, Aabb.infinite())
    np.testing.assert_array_equal(out.points, c.points)


def test_crop_disjoint_box_empty():
    c = grid_cloud()
    out = crop_aabb(c, Aabb(np.array([2.0, 2, 2]), np.array([3.0, 3, 3])))
    assert len(out) == 0


def test_crop_interior_216():
    c = grid_cloud(10)
    box = Aabb(np.full(3, 0.25), np.full(3, 0.75))
    out = crop_aabb(c, box)
    # independent membership check
    mask = np.all((c.points >= 0.25) & (c.points <= 0.75), axis=1)
    assert len(out) == mask.sum() == 6 ** 3
    np.testing.assert_array_equal(out.points, c.points[mask])


def test_crop_idempotent_and_preserves_normals():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (200, 3))
    nrm = rng.normal(size=(200, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    c = PointCloud(pts, nrm, frame="camera")
    box = Aabb(np.full(3, -0.5), np.full(3, 0.5))
    once = crop_aabb(c, box)
    twice = crop_aabb(once, box)
    np.testing.assert_array_equal(once.points, twice.points)
    np.testing.assert_array_equal(once.normals, twice.normals)
    assert once.frame == "camera"
    inside = np.all((pts >= -0.5) & (pts <= 0.5), axis=1)
    np.testing.assert_array_equal(once.normals, nrm[inside])


# --- voxel downsampling ---------------------------------------------------------

def test_voxel_single_point():
    c = PointCloud(np.array([[0.3, 0.4, 0.5]]))
    out = voxel_downsample(c, 0.1)
    np.testing.assert_allclose(out.points, [[0.3, 0.4, 0.5]])


def test_voxel_merges_close_points_to_midpoint():
    c = PointCloud(np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0]]))
    out = voxel_downsample(c, 0.01)
    np.testing.assert_allclose(out.points, [[0.0015, 0.0, 0.0]], atol=1e-15)


def test_voxel_against_brute_force_binning():
    c = grid_cloud(10)
    voxel = 0.5
    out = voxel_downsample(c, voxel)
    # brute-force oracle: bin by floor(p / voxel), centroid per bin
    keys = np.floor(c.points / voxel).astype(int)
    bins = {}
    for key, p in zip(map(tuple, keys), c.points):
        bins.setdefault(key, []).append(p)
    expect = {k: np.mean(v, axis=0) for k, v in bins.items()}
    assert len(out) == len(expect) <= 27
    for key, centroid in zip(sorted(expect), [expect[k] for k in sorted(expect)]):
        pass
    got = {tuple(np.floor(p / voxel + 1e-9).astype(int)): p for p in out.points}
    assert set(got) == set(expect)
    for k in expect:
        np.testing.assert_allclose(got[k], expect[k], atol=1e-12)


def test_voxel_order_independent():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (500, 3))
    c = PointCloud(pts)
    shuffled = PointCloud(pts[rng.permutation(500)])
    a = voxel_downsample(c, 0.2)
    b = voxel_downsample(shuffled, 0.2)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)


def test_voxel_rejects_nonpositive():
    with pytest.raises(NonPositiveVoxel):
        voxel_downsample(grid_cloud(2), 0.0)


# --- kd-tree --------------------------------------------------------------------

def test_kd_single_point():
    tree = KdTree(np.array([[1.0, 2.0, 3.0]]))
    assert kd_nearest(tree, (1.0, 2.0, 3.0)) == (0, 0.0)


def test_kd_matches_exhaustive_scan_exactly():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (1000, 3))
    tree = KdTree(pts)
    for q in rng.uniform(-1.2, 1.2, (100, 3)):
        idx, dist = kd_nearest(tree, q)
        bidx, bdist = brute_nearest(pts, q)
        assert idx == bidx
        assert dist == bdist  # bitwise, not approximate


def test_kd_tie_breaks_to_lowest_index():
    pts = np.full((10, 3), 5.0)
    pts[3] = [1.0, 0.0, 0.0]
    pts[7] = [-1.0, 0.0, 0.0]
    tree = KdTree(pts)
    idx, dist = kd_nearest(tree, (0.0, 0.0, 0.0))
    assert (idx, dist) == (3, 1.0)


def test_kd_tie_on_grid_matches_scan():
    c = grid_cloud(5)
    tree = KdTree(c.points)
    # query at a cell corner: 8 equidistant cell centers
    q = np.array([0.4, 0.4, 0.4])
    idx, dist = kd_nearest(tree, q)
    bidx, bdist = brute_nearest(c.points, q)
    assert (idx, dist) == (bidx, bdist)


def test_kd_empty_raises():
    with pytest.raises(EmptyTree):
        KdTree(np.zeros((0, 3)))


# --- normals --------------------------------------------------------------------

def plane_cloud(n=400, seed=3):
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1, 1, (n, 2))
    return PointCloud(pts)


def test_normals_on_plane_toward_viewpoint():
    c = estimate_normals(plane_cloud(), k=8, viewpoint=(0.0, 0.0, 1.0))
    np.testing.assert_allclose(c.normals, np.tile([0.0, 0.0, 1.0], (len(c), 1)),
                               atol=1e-6)


def test_normals_flip_with_viewpoint():
    c = estimate_normals(plane_cloud(), k=8, viewpoint=(0.0, 0.0, -1.0))
    np.testing.assert_allclose(c.normals, np.tile([0.0, 0.0, -1.0], (len(c), 1)),
                               atol=1e-6)


def test_normals_on_sphere_radial():
    # fibonacci sphere: near-uniform sampling, so every k-NN patch is round
    n = 2000
    i = np.arange(n)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    c = PointCloud(0.1 * dirs)
    out = estimate_normals(c, k=12, viewpoint=(0.0, 0.0, 0.0))
    # viewpoint at the center orients normals inward; compare to -radial
    dots = np.einsum("ni,ni->n", out.normals, -dirs)
    assert np.all(dots >= math.cos(math.radians(5.0)))


def test_normals_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(plane_cloud(5), k=8, viewpoint=(0, 0, 1))
    with pytest.raises(TooFewPoints):
        estimate_normals(plane_cloud(), k=2, viewpoint=(0, 0, 1))


# --- plane fitting ---------------------------------------------------------------

def test_fit_plane_exact():
    c = plane_cloud()
    shifted = PointCloud(c.points + [0.0, 0.0, 0.5])
    n, d, rms = fit_plane(shifted)
    np.testing.assert_allclose(n, [0.0, 0.0, 1.0], atol=1e-12)
    assert d == pytest.approx(0.5, abs=1e-12)
    assert rms <= 1e-12


def test_fit_plane_noisy():
    rng = np.random.default_rng(5)
    base = plane_cloud(2000, seed=6).points + [0.0, 0.0, 0.5]
    noisy = base + np.stack([np.zeros(2000), np.zeros(2000),
                             rng.uniform(-0.001, 0.001, 2000)], axis=1)
    n, d, rms = fit_plane(PointCloud(noisy))
    assert rms <= 0.001
    assert abs(d - 0.5) <= 1e-4


def test_fit_plane_collinear():
    pts = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        fit_plane(PointCloud(pts))


# --- PLY ------------------------------------------------------------------------

def test_ply_ascii_roundtrip(tmp_path):
    c = PointCloud(np.array([[0.0, 1.0, 2.0], [0.25, -0.5, 0.125], [3.0, 4.0, 5.0]]))
    path = tmp_path / "three.ply"
    save_ply(c, path)
    back = load_ply(path)
    np.testing.assert_array_equal(back.points, c.points)  # f32-exact values
    assert back.normals is None


def test_ply_normals_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    c = PointCloud(rng.uniform(-1, 1, (50, 3)).astype(np.float32).astype(float),
                   nrm)
    path = tmp_path / "n.ply"
    save_ply(c, path)
    back = load_ply(path)
    np.testing.assert_array_equal(back.points, c.points)
    assert back.normals is not None


def test_ply_binary_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(8)
    pts = rng.uniform(-10, 10, (5000, 3))
    c = PointCloud(pts)
    p1 = tmp_path / "a.ply"
    p2 = tmp_path / "b.ply"
    save_ply(c, p1, binary=True)
    once = load_ply(p1)
    # first write quantizes to f32; thereafter the roundtrip is bitwise stable
    np.testing.assert_array_equal(once.points, pts.astype("<f4").astype(float))
    save_ply(once, p2, binary=True)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(load_ply(p2).points, once.points)


def test_ply_truncated_data_names_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    "end_header\n0 0 0\n")
    with pytest.raises(ParseError) as err:
        load_ply(path)
    assert ":9:" in str(err.value)  # parse stops where row 2 should start


def test_ply_unknown_properties_skipped(tmp_path, caplog):
    path = tmp_path / "rgb.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    "property uchar red\n"
                    "end_header\n1 2 3 255\n4 5 6 0\n")
    with caplog.at_level("WARNING", logger="vispick.cloud"):
        c = load_ply(path)
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])
    assert any("red" in r.message for r in caplog.records)


def test_ply_rejects_garbage(tmp_path):
    path = tmp_path / "garbage.ply"
    path.write_text("not a ply file\n")
    with pytest.raises(ParseError):
        load_ply(path)


# --- container invariants ---------------------------------------------------------

def test_pointcloud_validates_normals():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.array([[1.0, 0, 0], [2.0, 0, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]))


def test_pointcloud_immutable():
    c = grid_cloud(2)
    with pytest.raises(ValueError):
        c.points[0, 0] = 99.0


def test_aabb_validates():
    with pytest.raises(ValueError):
        Aabb(np.array([1.0, 0, 0]), np.array([0.0, 1, 1]))
