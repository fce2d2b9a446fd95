import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hmdref import _backend
from hmdref.errors import RadiusTooSmall, TooFewPoints
from hmdref.geom import PointCloud
from hmdref.preprocess import (
    ClusterConfig,
    CropConfig,
    MlsConfig,
    PlaneRemovalConfig,
    Upsampling,
    estimate_normals,
    euclidean_cluster,
    euclidean_cluster_indices,
    mls_fit,
    mls_smooth,
    plane_inlier_counts,
    remove_planes,
    sphere_crop,
    voxel_downsample,
    voxel_keys,
)


def grid_plane(spacing=0.02, n=40, z=0.0):
    g = np.arange(n) * spacing
    x, y = np.meshgrid(g, g)
    return np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])


# -- crop --------------------------------------------------------------------


def test_crop_boundary():
    c = PointCloud(np.array([[1.9, 0, 0], [2.1, 0, 0], [2.0, 0, 0]]))
    out = sphere_crop(c, CropConfig((0, 0, 0), 2.0))
    np.testing.assert_array_equal(out.points, [[1.9, 0, 0], [2.0, 0, 0]])


def test_crop_empty():
    assert len(sphere_crop(PointCloud(np.empty((0, 3))), CropConfig())) == 0


def test_crop_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        CropConfig(radius=0.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_crop_matches_linear_scan(seed, radius):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (500, 3))
    center = rng.uniform(-1, 1, 3)
    out = sphere_crop(PointCloud(pts), CropConfig(tuple(center), radius))
    expect = [p for p in pts if np.sqrt(((p - center) ** 2).sum()) <= radius]
    np.testing.assert_array_equal(out.points, np.array(expect).reshape(-1, 3))
    again = sphere_crop(out, CropConfig(tuple(center), radius))
    assert again.equals(out)


# -- voxel grid -------------------------------------------------------------


def test_voxel_single_centroid():
    pts = np.array([[x, y, z] for x in (0.1, 0.3) for y in (0.1, 0.3) for z in (0.1, 0.3)])
    out = voxel_downsample(PointCloud(pts), 1.0)
    np.testing.assert_allclose(out.points, [[0.2, 0.2, 0.2]])


def test_voxel_finer_than_gaps_keeps_everything(rng):
    pts = rng.uniform(0, 1, (200, 3))
    gap = min(np.linalg.norm(pts[i] - pts[j]) for i in range(200) for j in range(i))
    out = voxel_downsample(PointCloud(pts), gap / 2)
    key = lambda a: sorted(map(tuple, a))  # noqa: E731
    assert key(out.points) == key(pts)


def test_voxel_containment_and_uniqueness(rng):
    pts = rng.uniform(-1, 1, (16000, 3))
    v = 0.05
    out = voxel_downsample(PointCloud(pts), v)
    assert len(out) <= len(pts)
    assert len(np.unique(voxel_keys(out.points, v), axis=0)) == len(out)
    half_diag = v * np.sqrt(3) / 2
    from scipy.spatial import cKDTree

    d, _ = cKDTree(pts).query(out.points)
    assert d.max() <= half_diag + 1e-12


def test_voxel_rejects_bad_size():
    with pytest.raises(ValueError):
        voxel_downsample(PointCloud(np.zeros((3, 3))), 0.0)


# -- normals ----------------------------------------------------------------


def test_normals_on_plane(each_backend):
    c = estimate_normals(PointCloud(grid_plane(z=-1.0)), 10)
    np.testing.assert_allclose(np.abs(c.normals[:, 2]), 1.0, atol=1e-6)
    # oriented toward the origin, which sits above the plane
    assert np.all(c.normals[:, 2] > 0)


def test_normals_on_sphere(rng, each_backend):
    d = rng.normal(size=(3000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c = estimate_normals(PointCloud(d * 0.5 + [2.0, 0, 0]), 15)
    dots = np.abs(np.einsum("ij,ij->i", c.normals, d))
    assert 1.0 - dots.mean() < 0.05
    np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0)


def test_normals_four_coplanar_points():
    pts = np.array([[0, 0, 1.0], [1, 0, 1], [0, 1, 1], [1, 1, 1]])
    c = estimate_normals(PointCloud(pts), 3)
    np.testing.assert_allclose(c.normals, np.tile([0, 0, -1.0], (4, 1)), atol=1e-12)


def test_normals_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.zeros((5, 3))), 5)
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(20, 3))), 2)


# -- MLS --------------------------------------------------------------------


def test_mls_noiseless_plane_is_fixed_point(each_backend):
    pts = grid_plane() + [0.3, -0.2, 0.5]
    out = mls_smooth(PointCloud(pts), MlsConfig(0.05))
    assert len(out) == len(pts)
    np.testing.assert_allclose(out.points, pts, atol=1e-6)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_mls_reduces_plane_noise(rng, order, each_backend):
    pts = grid_plane(0.01, 60)
    noisy = pts.copy()
    noisy[:, 2] += rng.normal(0, 0.005, len(pts))
    out = mls_smooth(PointCloud(noisy), MlsConfig(0.05, order))
    before = np.sqrt(np.mean(noisy[:, 2] ** 2))
    after = np.sqrt(np.mean(out.points[:, 2] ** 2))
    assert after < before


def test_mls_order_two_tracks_curvature(each_backend):
    g = grid_plane(0.02, 30) - 0.3
    f = lambda x, y: 0.7 * x**2 - 0.4 * x * y + 0.2 * y**2  # noqa: E731
    g[:, 2] = f(g[:, 0], g[:, 1])

    def err(order):
        out = mls_smooth(PointCloud(g), MlsConfig(0.08, order)).points
        return np.abs(out[:, 2] - f(out[:, 0], out[:, 1])).max()

    e1, e2 = err(1), err(2)
    assert e2 < 5e-5
    assert e2 < e1 / 10


def test_mls_radius_too_small():
    with pytest.raises(RadiusTooSmall):
        mls_smooth(PointCloud(grid_plane(0.02)), MlsConfig(0.005))


def test_mls_drops_isolated_points():
    pts = np.vstack([grid_plane(0.02, 40), [[10.0, 10.0, 10.0]]])
    out = mls_smooth(PointCloud(pts), MlsConfig(0.05))
    assert len(out) == len(pts) - 1


def test_mls_voxel_dilation_upsamples(each_backend):
    pts = grid_plane(0.02, 20)
    out = mls_smooth(PointCloud(pts), MlsConfig(0.05, 2, Upsampling.VOXEL_GRID_DILATION, 0.05))
    assert len(out) > len(pts)
    np.testing.assert_allclose(out.points[:, 2], 0.0, atol=1e-9)


def test_mls_config_validation():
    with pytest.raises(ValueError):
        MlsConfig(0.0)
    with pytest.raises(ValueError):
        MlsConfig(0.05, 0)
    with pytest.raises(ValueError):
        MlsConfig(0.05, 2, Upsampling.VOXEL_GRID_DILATION, 0.0)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_mls_backends_agree(rng, order):
    pts = rng.normal(size=(3000, 3)) * [0.3, 0.3, 0.02]
    cfg = MlsConfig(0.06, order)
    with _backend.backend("numba"):
        fa, va, ca = mls_fit(pts, cfg)
    with _backend.backend("numpy"):
        fb, vb, cb = mls_fit(pts, cfg)
    np.testing.assert_array_equal(va, vb)
    np.testing.assert_array_equal(ca, cb)
    np.testing.assert_allclose(fa[va], fb[vb], atol=1e-9)


# -- plane removal ----------------------------------------------------------


def test_remove_pure_plane(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (2000, 2)), np.zeros(2000)])
    cfg = PlaneRemovalConfig(0.01, 200)
    rest, planes = remove_planes(PointCloud(pts), cfg)
    assert len(planes) >= 1
    assert len(rest) < cfg.min_inlier_fraction * len(pts)


def test_remove_plane_keeps_sphere(rng):
    plane = np.column_stack([rng.uniform(-2, 2, (10000, 2)), rng.normal(0, 0.002, 10000)])
    d = rng.normal(size=(1000, 3))
    sphere = d / np.linalg.norm(d, axis=1, keepdims=True) * 0.3 + [0, 0, 0.6]
    rest, planes = remove_planes(PointCloud(np.vstack([plane, sphere])), PlaneRemovalConfig(0.01, 300))
    kept = rest.points
    plane_left = np.count_nonzero(kept[:, 2] < 0.2)
    sphere_left = np.count_nonzero(kept[:, 2] >= 0.2)
    assert plane_left <= 0.01 * 10000
    assert sphere_left >= 0.99 * 1000


def test_remove_nothing_from_ball(rng):
    d = rng.normal(size=(3000, 3))
    ball = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0, 1, (3000, 1)) ** (1 / 3)
    rest, planes = remove_planes(PointCloud(ball), PlaneRemovalConfig(0.01, 300))
    assert planes == []
    assert rest.equals(PointCloud(ball))


def test_remove_planes_partition_and_determinism(rng):
    pts = np.vstack([grid_plane(0.03, 30), rng.uniform(0, 0.9, (400, 3))])
    cfg = PlaneRemovalConfig(0.01, 100, rng_seed=7)
    rest, planes = remove_planes(PointCloud(pts), cfg)
    rest2, planes2 = remove_planes(PointCloud(pts), cfg)
    assert rest.equals(rest2)
    assert all(np.array_equal(a, b) for a, b in zip(planes, planes2))
    # every input point is either kept or an inlier of a removed plane
    rows = {tuple(p) for p in rest.points}
    removed_mask = np.array([tuple(p) not in rows for p in pts])
    assert np.count_nonzero(~removed_mask) == len(rest)
    for p in pts[removed_mask]:
        assert any(abs(p @ pl[:3] + pl[3]) <= cfg.distance_threshold for pl in planes)


def test_plane_counts_backends_agree(rng):
    pts = rng.uniform(-1, 1, (5000, 3))
    pl = rng.normal(size=(64, 4))
    pl[:, :3] /= np.linalg.norm(pl[:, :3], axis=1, keepdims=True)
    pl[:, 3] *= 0.2
    with _backend.backend("numba"):
        a = plane_inlier_counts(pts, pl, 0.05)
    with _backend.backend("numpy"):
        b = plane_inlier_counts(pts, pl, 0.05)
    np.testing.assert_array_equal(a, b)
    ref = [(np.abs(pts @ p[:3] + p[3]) <= 0.05).sum() for p in pl]
    assert np.abs(a - ref).max() <= 2  # brute force may differ on boundary rounding


# -- clustering -------------------------------------------------------------


def union_find_clusters(pts, tol, lo, hi):
    n = len(pts)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.sqrt(((pts[i] - pts[j]) ** 2).sum()) <= tol:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    out = [g for g in groups.values() if lo <= len(g) <= hi]
    out.sort(key=lambda g: (-len(g), g[0]))
    return out


def blobs(rng, n=100):
    return np.vstack([rng.normal(0, 0.02, (n, 3)), rng.normal(0, 0.02, (n, 3)) + [1.0, 0, 0]])


def test_two_blobs(rng):
    c = PointCloud(blobs(rng))
    assert len(euclidean_cluster(c, ClusterConfig(0.1, 10))) == 2
    assert len(euclidean_cluster(c, ClusterConfig(2.0, 10))) == 1


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.4), st.integers(1, 10))
def test_clusters_match_union_find(seed, tol, lo):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, (150, 3))
    got = euclidean_cluster_indices(PointCloud(pts), ClusterConfig(tol, lo, 60))
    assert [list(g) for g in got] == union_find_clusters(pts, tol, lo, 60)


def test_clusters_are_disjoint(rng):
    pts = rng.uniform(0, 1, (800, 3))
    got = euclidean_cluster_indices(PointCloud(pts), ClusterConfig(0.06, 1))
    flat = np.concatenate(got)
    assert len(flat) == len(np.unique(flat)) == len(pts)


def test_cluster_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(0.1, 0)
    with pytest.raises(ValueError):
        ClusterConfig(0.1, 10, 5)
