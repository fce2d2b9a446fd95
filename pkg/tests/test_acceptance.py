"""End-to-end acceptance checks on synthetic desk-scale scenes.

Each test reports one PASS/FAIL line (collected in the terminal summary)
before asserting, so a failing criterion still shows its measured numbers.
"""

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import stats

from hmdref.bench import (
    PARAMS,
    SUCCESS_DEG,
    SUCCESS_MM,
    Algorithm,
    CloudSize,
    SweepSpec,
    guess_rms_mm,
    run_one,
    run_robustness,
    run_sweep,
    seed_pipeline_from_params,
)
from hmdref.cloud_io import SamplingConfig, TriangleMesh, sample_mesh
from hmdref.coarse4pcs import FourPcsConfig, segment_then_register
from hmdref.errors import RadiusTooSmall, SegmentationFailed
from hmdref.geom import PointCloud, RigidTransform, pose_error, rot_z
from hmdref.icp import IcpConfig, SeedPose, register_icp, register_icp_4rot
from hmdref.kdtree import KdTree
from hmdref.pipeline import reference_from_seed
from hmdref.preprocess import MlsConfig, PlaneRemovalConfig, mls_smooth, remove_planes
from hmdref.scene_synth import (
    PerturbationGrid,
    clutter_scene,
    desk_scene,
    isolated_scene,
    merged_table_scene,
    robot_mesh,
    robot_model_cloud,
    synthesize_scene,
    simulate_user_guess,
    truth_seed,
)
from hmdref.service import ReferenceRequest, ReferenceServer, Status, request, seed_from_quaternion, seed_to_quaternion, send_raw

NOISE = 0.005
N_DESK = 12
ICP_PIPELINE = seed_pipeline_from_params(PARAMS[Algorithm.ICP])
# 4PCS settings that keep ten segmentations inside the time budget
SEGMENT_4PCS = FourPcsConfig(delta=0.025, max_bases=50, stop_score=0.8)
SEGMENT_ICP = IcpConfig(0.05, 200)


def success(est, truth, model) -> tuple[bool, float, float]:
    dt, dr = pose_error(est, truth, model.centroid())
    return dt * 1000.0 < SUCCESS_MM and dr < SUCCESS_DEG, dt * 1000.0, dr


@pytest.fixture(scope="module")
def desks():
    return [synthesize_scene(desk_scene(s)) for s in range(N_DESK)]


@pytest.fixture(scope="module")
def known_transform_runs(desks, model):
    """Criterion 2 runs: seeds perturbed within 0.3 m and 36 deg of the truth."""
    out = []
    for s, (scene, truth) in enumerate(desks):
        rng = np.random.default_rng([2024, s])
        d = rng.normal(size=3)
        off = d / np.linalg.norm(d) * 0.3 * rng.uniform() ** (1 / 3)
        base = truth_seed(truth)
        seed = SeedPose(tuple(np.asarray(base.position) + off), base.yaw + np.radians(rng.uniform(-36.0, 36.0)))
        res = reference_from_seed(scene, model, seed, ICP_PIPELINE)
        ok, _, _ = success(res.transform, truth, model)
        out.append((ok and res.converged, res.rms_mm))
    return out


@pytest.fixture(scope="module")
def robustness(model):
    scene, truth = synthesize_scene(desk_scene(1))
    return run_robustness(scene, truth, model, PerturbationGrid(), ICP_PIPELINE, max_offset=0.3)


def test_c01_self_registration(acceptance_report):
    cloud = robot_model_cloud(16_000, seed=1)
    register_icp(cloud, cloud, RigidTransform.identity(), IcpConfig())  # warm the JIT
    t0 = time.perf_counter()
    res = register_icp(cloud, cloud, RigidTransform.identity(), IcpConfig())
    dt = time.perf_counter() - t0
    dev = np.abs(res.transform.matrix() - np.eye(4)).max()
    ok = dev <= 1e-9 and res.rms_mm < 1e-6 and dt < 1.0
    acceptance_report(1, ok, f"max |T - I| = {dev:.1e}, rms {res.rms_mm:.1e} mm, {dt:.3f} s")
    assert ok


def test_c02_known_transform_recovery(known_transform_runs, acceptance_report):
    rate = np.mean([ok for ok, _ in known_transform_runs])
    mean_rms = np.mean([r for _, r in known_transform_runs])
    ok = rate >= 0.9 and mean_rms <= 3 * NOISE * 1000.0
    acceptance_report(2, ok, f"success {rate:.0%} of {N_DESK}, mean rms {mean_rms:.2f} mm (limit {3 * NOISE * 1000:.0f})")
    assert ok


def test_c03_improvement_over_user_guess(desks, model, acceptance_report):
    pre, post = [], []
    for s, (scene, truth) in enumerate(desks):
        guess = simulate_user_guess(truth, 0.1, np.radians(20.0), s)
        pre.append(guess_rms_mm(model, KdTree(scene.points), guess))
        post.append(reference_from_seed(scene, model, guess, ICP_PIPELINE).rms_mm)
    factor = np.mean(pre) / np.mean(post)
    ok = factor >= 3.0
    acceptance_report(3, ok, f"guess {np.mean(pre):.2f} mm -> icp {np.mean(post):.2f} mm, factor {factor:.2f}")
    assert ok


def test_c04_rotation_robustness(robustness, acceptance_report):
    curve = robustness.curve()
    near = [(deg, ok) for deg, _, ok in curve if min(deg, 360.0 - deg) <= 36.0 + 1e-9]
    zero = robustness.rotation[0]
    best = min(e.rms_mm for e in robustness.rotation if e.success)
    # entries that reach the same optimum differ only by convergence noise
    ok = len(near) == 5 and all(s for _, s in near) and zero.success and zero.rms_mm <= best + 0.01
    wins = sum(s for _, _, s in curve)
    acceptance_report(4, ok, f"{sum(s for _, s in near)}/5 within 36 deg, {wins}/{len(curve)} overall, zero {zero.rms_mm:.3f} vs best {best:.3f} mm")
    assert ok


def test_c05_translation_robustness(robustness, known_transform_runs, acceptance_report):
    entries = robustness.translation
    good = [e.rms_mm for e in entries if e.success]
    rate = len(good) / len(entries)
    limit = 2 * np.mean([r for _, r in known_transform_runs])
    std = float(np.std(good))
    ok = rate >= 0.85 and std <= limit
    acceptance_report(5, ok, f"success {rate:.1%} of {len(entries)} offsets, rms std {std:.3f} mm (limit {limit:.1f})")
    assert ok


def test_c06_sliding_box_detection(model, acceptance_report):
    boxed = registered = 0
    n = 20
    for s in range(n):
        scene, truth = synthesize_scene(clutter_scene(s))
        res = run_one(Algorithm.SLIDEBOX, PARAMS[Algorithm.SLIDEBOX], scene, model, SeedPose())
        if not res.info["box"].contains(truth.apply(model.centroid()[None]))[0]:
            continue
        boxed += 1
        registered += success(res.transform, truth, model)[0]
    ok = boxed >= 0.9 * n and registered >= 0.9 * boxed
    acceptance_report(6, ok, f"correct box {boxed}/{n}, registered {registered}/{boxed}")
    assert ok


def test_c07_four_rotation_icp(model, acceptance_report):
    base = desk_scene(0)
    icp = IcpConfig(PARAMS[Algorithm.SLIDEBOX]["max_corr_dist"], PARAMS[Algorithm.SLIDEBOX]["max_iter"])
    starts = np.array([0.0, 90.0, 180.0, 270.0])
    bad = []
    for deg in range(0, 360, 10):
        truth = RigidTransform(rot_z(np.radians(deg)), base.robot_pose.translation)
        scene, _ = synthesize_scene(base.replace(robot_pose=truth))
        center = truth.apply(model.bounds().center[None])[0]
        res = register_icp_4rot(model, scene, center, icp)
        gap = np.abs((deg - starts + 180.0) % 360.0 - 180.0)
        nearest = starts[np.isclose(gap, gap.min())]
        good = success(res.transform, truth, model)[0] and res.info["start_yaw_deg"] in nearest
        if not good:
            bad.append(deg)
    ok = not bad
    acceptance_report(7, ok, f"36 yaw errors checked, failures at {bad or 'none'}")
    assert ok


def test_c08_segmentation_4pcs(model, acceptance_report):
    hits = 0
    for s in range(10):
        scene, truth = synthesize_scene(isolated_scene(s))
        try:
            res = segment_then_register(scene, model, cfg=dataclasses.replace(SEGMENT_4PCS, rng_seed=s), icp_cfg=SEGMENT_ICP)
        except SegmentationFailed:
            continue
        hits += success(res.transform, truth, model)[0]
    merged, _ = synthesize_scene(merged_table_scene(0))
    try:
        segment_then_register(merged, model, cfg=SEGMENT_4PCS, icp_cfg=SEGMENT_ICP)
        merged_fails = False
    except SegmentationFailed:
        merged_fails = True
    ok = hits >= 8 and merged_fails
    acceptance_report(8, ok, f"isolated {hits}/10 within 10 mm / 2 deg, merged table raises SegmentationFailed: {merged_fails}")
    assert ok


def visible_robot(n: int, rng_seed: int) -> np.ndarray:
    """Robot surface without the underside of the base, which rests on the floor."""
    mesh = robot_mesh()
    tri = mesh.vertices[mesh.triangles]
    hidden = np.all(np.abs(tri[:, :, 2]) < 1e-12, axis=1)
    return sample_mesh(TriangleMesh(mesh.vertices, mesh.triangles[~hidden]), SamplingConfig(n, rng_seed)).points


def stacked_triangles(rng) -> TriangleMesh:
    """Disjoint triangles of varied area, one per integer height, so z identifies the triangle."""
    k = 12
    verts = []
    for i in range(k):
        a, b = rng.uniform(0.05, 1.0, 2)
        verts += [(0.0, 0.0, i), (a, 0.0, i), (0.0, b, i)]
    return TriangleMesh(np.array(verts), np.arange(3 * k).reshape(k, 3))


def test_c09_preprocessing_oracles(acceptance_report):
    rng = np.random.default_rng(9)
    # plane removal: floor plus a robot standing on it, 2 mm noise, 8 mm threshold
    floor = np.column_stack([rng.uniform(-1, 1, (10_000, 2)), np.zeros(10_000)])
    robot = RigidTransform(rot_z(0.4), [0.1, 0.2, 0.0]).apply(visible_robot(6000, 1))
    pts = np.vstack([floor, robot]) + rng.normal(0, 0.002, (16_000, 3))
    tag = np.r_[np.zeros(len(floor), bool), np.ones(len(robot), bool)]
    rest, _ = remove_planes(PointCloud(pts), PlaneRemovalConfig(0.008, 500))
    kept = np.zeros(len(pts), bool)
    kept[KdTree(pts).query(rest.points)[0]] = True
    plane_gone = 1.0 - kept[~tag].mean()
    robot_lost = 1.0 - kept[tag].mean()

    # sampling: chi-square of per-triangle counts against area shares
    pvals = []
    for seed in range(10):
        mesh = stacked_triangles(np.random.default_rng([seed, 7]))
        z = sample_mesh(mesh, SamplingConfig(20_000, seed)).points[:, 2]
        counts = np.bincount(np.rint(z).astype(int), minlength=12)
        areas = mesh.triangle_areas()
        pvals.append(stats.chisquare(counts, areas / areas.sum() * counts.sum()).pvalue)

    # MLS: noisy plane, best radius smooths, worst radius is too small for 2 cm spacing
    g = np.arange(0, 1.0, 0.01)
    xy = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    noisy = np.column_stack([xy, rng.normal(0, NOISE, len(xy))])
    out = mls_smooth(PointCloud(noisy), MlsConfig(0.05))
    before = np.sqrt(np.mean(noisy[:, 2] ** 2))
    after = np.sqrt(np.mean(out.points[:, 2] ** 2))
    sparse = np.column_stack([xy[::4] * 2, np.zeros(len(xy[::4]))])
    try:
        mls_smooth(PointCloud(sparse), MlsConfig(0.005))
        too_small = False
    except RadiusTooSmall:
        too_small = True

    ok = plane_gone >= 0.99 and robot_lost <= 0.01 and min(pvals) > 0.01 and after < before and too_small
    acceptance_report(
        9,
        ok,
        f"plane removed {plane_gone:.2%}, robot lost {robot_lost:.2%}, min chi2 p {min(pvals):.3f}, "
        f"mls {before * 1000:.2f} -> {after * 1000:.2f} mm, radius 0.005 raises: {too_small}",
    )
    assert ok


def test_c10_sweep_directionality(tmp_path, acceptance_report):
    best = {"max_corr_dist": [1.0], "max_iter": [500], "mls_method": ["voxel_grid"], "mls_radius": [0.05], "mls_param": [0.05]}
    worst = {"max_corr_dist": [0.1], "max_iter": [50], "mls_method": ["voxel_grid"], "mls_radius": [0.005], "mls_param": [0.5]}
    parts = []
    ok = True
    for size in (CloudSize.SMALL, CloudSize.BIG):
        rb = run_sweep(SweepSpec(Algorithm.ICP, best, size, ["desk:0"])).rows[0]
        rw = run_sweep(SweepSpec(Algorithm.ICP, worst, size, ["desk:0"])).rows[0]
        ok &= rb.rms_mm < rw.rms_mm
        parts.append(f"{size.value}: best {rb.rms_mm:.2f} < worst {rw.rms_mm:.2f}{' (' + rw.error + ')' if rw.error else ''}")
    spec = SweepSpec(Algorithm.ICP, {"max_corr_dist": [0.1, 1.0], "max_iter": [50, 500]}, scenes=["desk:0", "desk:1"])
    run_sweep(spec, tmp_path / "a.csv", tmp_path / "as.csv", resume=False)
    run_sweep(spec, tmp_path / "b.csv", tmp_path / "bs.csv", resume=False)
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    same &= (tmp_path / "as.csv").read_bytes() == (tmp_path / "bs.csv").read_bytes()
    ok &= same
    acceptance_report(10, ok, "; ".join(parts) + f"; rerun byte-identical: {same}")
    assert ok


def test_c11_service_fidelity(model, acceptance_report):
    scenes = [synthesize_scene(desk_scene(s)) for s in range(4)]
    rng = np.random.default_rng(11)
    reqs = []
    for _ in range(100):
        cloud, truth = scenes[rng.integers(len(scenes))]
        keep = np.sort(rng.choice(len(cloud), rng.integers(2000, 8000), replace=False))
        base = truth_seed(truth)
        off = rng.uniform(-0.1, 0.1, 3) * [1, 1, 0]
        seed = SeedPose(tuple(np.asarray(base.position) + off), base.yaw + rng.uniform(-0.3, 0.3))
        reqs.append(ReferenceRequest(Algorithm.ICP, seed, cloud.subset(keep)))

    def in_process(req):
        pts = np.asarray(req.cloud.points, dtype=np.float32).astype(np.float64)
        return reference_from_seed(PointCloud(pts), model, seed_from_quaternion(seed_to_quaternion(req.seed)), ICP_PIPELINE)

    srv = ReferenceServer(("127.0.0.1", 0), model)
    srv.start_background()
    try:
        served = [request("127.0.0.1", srv.port, r) for r in reqs]
        identical = all(
            s.status is Status.OK and np.array_equal(s.transform.matrix(), in_process(r).transform.matrix())
            for s, r in zip(served, reqs)
        )
        with ThreadPoolExecutor(8) as ex:
            parallel = list(ex.map(lambda r: request("127.0.0.1", srv.port, r), reqs[:32]))
        concurrent_same = all(np.array_equal(a.transform.matrix(), b.transform.matrix()) for a, b in zip(parallel, served))
        junk = [b"", b"\x00" * 3, b"REF1", b"REF1\xff\xff\xff\x7f", b"REF1\x02\x00\x00\x00{}", reqs[0].encode()[:-7]]
        junk += [bytes(rng.integers(0, 256, 64, dtype=np.uint8)) for _ in range(10)]
        bad_ok = all(send_raw("127.0.0.1", srv.port, j).error_code == "BAD_FRAME" for j in junk)
        alive = request("127.0.0.1", srv.port, reqs[0]).status is Status.OK
    finally:
        srv.stop()
    ok = identical and concurrent_same and bad_ok and alive
    acceptance_report(
        11, ok, f"100 requests bit-identical: {identical}, 8-way concurrent == serial: {concurrent_same}, malformed handled: {bad_ok and alive}"
    )
    assert ok
