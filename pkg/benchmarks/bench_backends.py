"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_backends.py [--points 16000] [--repeat 3]

Each case runs once per backend to warm up (JIT compile, caches), then
``--repeat`` times; the best time is reported together with the largest
difference between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hmdref import _backend
from hmdref.coarse4pcs import _Grid, lcp_scores
from hmdref.descriptors import fpfh_at, spfh
from hmdref.geom import PointCloud, rot_z
from hmdref.icp import IcpConfig, register_icp, seed_to_transform, SeedPose
from hmdref.kdtree import KdTree
from hmdref.preprocess import MlsConfig, estimate_normals, mls_fit, plane_inlier_counts, voxel_representatives
from hmdref.scene_synth import desk_scene, robot_model_cloud, synthesize_scene


def _best(fn, repeat: int):
    out = fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return np.inf
    fin = np.isfinite(a) & np.isfinite(b)
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return np.inf
    return float(np.max(np.abs(a[fin] - b[fin]), initial=0.0))


def cases(n_points: int):
    scene, truth = synthesize_scene(desk_scene(0, samples_total=n_points))
    pts = scene.points
    model = robot_model_cloud()
    rng = np.random.default_rng(0)
    queries = pts[rng.choice(len(pts), 2000, replace=False)] + rng.normal(0, 0.01, (2000, 3))
    with_normals = estimate_normals(scene, 20)
    keys = voxel_representatives(pts, 0.05)
    seed = SeedPose(truth.translation + [0.05, -0.04, 0.0], truth.yaw() + 0.15)
    planes = np.array([[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, -0.5]] * 50)
    grid = _Grid(pts[: min(len(pts), 2000)], 0.02)
    rots = np.stack([rot_z(a) for a in np.linspace(0, 2 * np.pi, 200)])
    trans = rng.normal(0, 0.05, (200, 3))

    def tree_nn():
        return KdTree(pts).query(queries)

    def tree_radius():
        off, idx = KdTree(pts).query_radius(queries, 0.05)
        return off.astype(float), idx.astype(float)

    def normals():
        return estimate_normals(scene, 20).normals

    def mls():
        fits, valid, _ = mls_fit(pts, MlsConfig(0.05))
        return fits[valid]

    def fpfh():
        tree = KdTree(pts)
        sp = spfh(with_normals, 0.15, tree)
        return fpfh_at(with_normals, keys, 0.15, sp, tree)

    def icp():
        return register_icp(model, scene, seed_to_transform(seed), IcpConfig(0.5, 100)).transform.matrix()

    def plane_counts():
        return plane_inlier_counts(pts, planes, 0.02).astype(float)

    def lcp():
        # non-winning scores may be pruned early by the numba kernel; compare the winner
        sc = lcp_scores(model.points[:500], rots, trans, grid)
        return np.array([sc.max(), float(np.argmax(sc))])

    return [
        ("kd-tree nearest (2000 q)", tree_nn),
        ("kd-tree radius 5 cm (2000 q)", tree_radius),
        ("normals k=20", normals),
        ("MLS fit r=5 cm", mls),
        ("FPFH r=15 cm", fpfh),
        ("ICP 100 iter", icp),
        ("RANSAC plane scoring x100", plane_counts),
        ("4PCS LCP 200 poses", lcp),
    ]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=16000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    print(f"{'case':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(args.points):
        with _backend.backend("numba"):
            t_nb, out_nb = _best(fn, args.repeat)
        with _backend.backend("numpy"):
            t_np, out_np = _best(fn, args.repeat)
        print(f"{name:32s} {t_nb * 1e3:10.1f} {t_np * 1e3:10.1f} {t_np / t_nb:8.1f} {_diff(out_nb, out_np):10.2e}")


if __name__ == "__main__":
    main()
