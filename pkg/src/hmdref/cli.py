"""``hmdref`` command line.

Exit codes: 0 on success, 2 when a registration or sweep row failed,
1 on bad invocation (unknown files, malformed specs, invalid values).
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np
import yaml

from .bench import (
    PARAMS,
    Algorithm,
    CloudSize,
    SweepSpec,
    resolve_scene,
    seed_pipeline_from_params,
    robustness_table_csv,
    robustness_to_csv,
    run_one,
    run_robustness,
    run_sweep,
)
from .cloud_io import SamplingConfig, load_cloud, load_mesh, sample_mesh, save_cloud
from .errors import ReferencingError
from .geom import PointCloud
from .icp import SeedPose
from .preprocess import CropConfig, sphere_crop
from .scene_synth import PerturbationGrid, robot_model_cloud, save_scene_spec, synthesize_scene
from .service import DEFAULT_PORT, ReferenceServer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILED = 2

# flag name -> (parameter key, type); one entry per tunable parameter
_PARAM_FLAGS = {
    "max-corr-dist": ("max_corr_dist", float),
    "max-iter": ("max_iter", int),
    "mls-method": ("mls_method", str),
    "mls-radius": ("mls_radius", float),
    "mls-param": ("mls_param", float),
    "crop-radius": ("crop_radius", float),
    "overlap": ("overlap", float),
    "delta": ("delta", float),
    "sample-size": ("sample_size", int),
    "max-bases": ("max_bases", int),
    "step-fraction": ("step_fraction", float),
    "min-points": ("min_points", int),
    "keypoint-voxel": ("keypoint_voxel", float),
    "match-ratio-max": ("match_ratio_max", float),
    "feature-radius": ("feature_radius", float),
}


def _add_params(p: argparse.ArgumentParser, alg: Algorithm) -> None:
    for flag, (key, typ) in _PARAM_FLAGS.items():
        if key in PARAMS[alg]:
            p.add_argument(f"--{flag}", dest=key, type=typ, default=PARAMS[alg][key], help=f"default {PARAMS[alg][key]}")


def _params(args, alg: Algorithm) -> dict:
    return {k: getattr(args, k) for k in PARAMS[alg]}


def _model(args) -> PointCloud:
    return load_cloud(args.model) if args.model else robot_model_cloud()


def _pose_json(res) -> dict:
    return {
        "transform": res.transform.matrix().tolist(),
        "yaw_deg": float(np.degrees(res.transform.yaw())),
        "rms_mm": res.rms_mm,
        "iterations": res.iterations_used,
        "converged": res.converged,
    }


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, default=str) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _register(args, alg: Algorithm) -> int:
    scene = load_cloud(args.scene)
    model = _model(args)
    seed = SeedPose(args.seed_pose[:3], np.radians(args.seed_pose[3])) if alg is Algorithm.ICP else SeedPose()
    try:
        res = run_one(alg, _params(args, alg), scene, model, seed, getattr(args, "seed", 0))
    except ReferencingError as exc:
        _emit({"status": "ERROR", "error_code": exc.code, "message": str(exc)}, args.out)
        return EXIT_FAILED
    _emit({"status": "OK", **_pose_json(res)}, args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    mesh = load_mesh(args.mesh)
    cloud = sample_mesh(mesh, SamplingConfig(args.n, args.seed))
    if args.noise > 0:
        rng = np.random.default_rng([args.seed, 1])
        cloud = PointCloud(cloud.points + rng.normal(0.0, args.noise, cloud.points.shape))
    save_cloud(cloud, args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    size = CloudSize(args.size) if args.size else None
    spec = resolve_scene(args.scene, size)
    if args.samples:
        spec = spec.replace(samples_total=args.samples)
    cloud, truth = synthesize_scene(spec)
    save_cloud(cloud, args.out)
    if args.save_spec:
        save_scene_spec(spec, args.save_spec)
    _emit({"points": len(cloud), "truth": truth.matrix().tolist(), "truth_yaw_deg": float(np.degrees(truth.yaw()))}, None)
    return EXIT_OK


def cmd_crop(args) -> int:
    cloud = load_cloud(args.cloud)
    out = sphere_crop(cloud, CropConfig(tuple(args.center), args.radius))
    save_cloud(out, args.out)
    print(len(out))
    return EXIT_OK


def cmd_register_icp(args) -> int:
    return _register(args, Algorithm.ICP)


def cmd_register_4pcs(args) -> int:
    return _register(args, Algorithm.FOURPCS)


def cmd_detect(args) -> int:
    return _register(args, Algorithm.SLIDEBOX)


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    res = run_sweep(spec, args.out, args.summary, timing=args.timing, resume=not args.no_resume)
    for s in res.summary:
        print(f"{s.algorithm} {s.size}: {s.converged}/{s.rows} converged, mean rms {s.mean:.3f} mm")
    return EXIT_FAILED if res.errors else EXIT_OK


def cmd_robustness(args) -> int:
    spec = resolve_scene(args.scene, CloudSize(args.size))
    scene, truth = synthesize_scene(spec)
    cfg = seed_pipeline_from_params(_params(args, Algorithm.ICP))
    grid = PerturbationGrid(np.radians(args.rotation_step), args.translation_extent, args.translation_step)
    res = run_robustness(scene, truth, _model(args), grid, cfg, args.max_offset, not args.no_rotation, not args.no_translation)
    Path(args.out).write_text(robustness_to_csv(res))
    if args.table:
        Path(args.table).write_text(robustness_table_csv(res))
    failed = any(e.error for e in res.rotation + res.translation)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_serve(args) -> int:
    alg = Algorithm(args.algorithm)
    defaults = {alg.value: _params(args, alg)}
    srv = ReferenceServer((args.bind, args.port), _model(args), defaults, alg)
    logging.getLogger(__name__).info("listening on %s:%d", args.bind, srv.port)

    def stop(signum, frame):
        # shutdown() blocks until serve_forever returns, so hand it to a thread
        threading.Thread(target=srv.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    try:
        srv.serve_forever()
    finally:
        srv.server_close()  # waits for in-flight requests
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hmdref", description="Robot base referencing from spatial-mapping point clouds.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample a mesh uniformly by area")
    p.add_argument("mesh")
    p.add_argument("-n", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="gaussian sigma in meters")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("synth", help="synthesize a scene cloud (preset:seed or scene YAML)")
    p.add_argument("scene")
    p.add_argument("--size", choices=[s.value for s in CloudSize])
    p.add_argument("--samples", type=int)
    p.add_argument("--save-spec")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("crop", help="keep points within a sphere")
    p.add_argument("cloud")
    p.add_argument("--center", type=float, nargs=3, required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=cmd_crop)

    for name, alg, fn, helptext in (
        ("register-icp", Algorithm.ICP, cmd_register_icp, "seed-guided ICP"),
        ("register-4pcs", Algorithm.FOURPCS, cmd_register_4pcs, "segmentation + 4PCS + ICP"),
        ("detect", Algorithm.SLIDEBOX, cmd_detect, "sliding-box detection + four-start ICP"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("scene", help="scene cloud file")
        p.add_argument("--model", help="model cloud file (default: bundled robot)")
        if alg is Algorithm.ICP:
            p.add_argument("--seed-pose", type=float, nargs=4, metavar=("X", "Y", "Z", "YAW_DEG"), required=True)
        if alg is Algorithm.FOURPCS:
            p.add_argument("--seed", type=int, default=0, help="base sampling RNG seed")
        _add_params(p, alg)
        p.add_argument("-o", "--out", help="write result JSON here instead of stdout")
        p.set_defaults(fn=fn)

    p = sub.add_parser("sweep", help="run a parameter sweep from a YAML spec")
    p.add_argument("spec")
    p.add_argument("--out", required=True, help="per-row CSV")
    p.add_argument("--summary", required=True, help="summary CSV")
    p.add_argument("--timing", action="store_true", help="add wall_time_ms (makes output run-dependent)")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("robustness", help="ICP from perturbed seeds around the true pose")
    p.add_argument("scene", help="preset:seed or scene YAML")
    p.add_argument("--size", choices=[s.value for s in CloudSize], default="small")
    p.add_argument("--model")
    p.add_argument("--rotation-step", type=float, default=18.0, help="degrees")
    p.add_argument("--translation-extent", type=float, default=1.0)
    p.add_argument("--translation-step", type=float, default=0.1)
    p.add_argument("--max-offset", type=float, help="skip translation offsets longer than this (m)")
    p.add_argument("--no-rotation", action="store_true")
    p.add_argument("--no-translation", action="store_true")
    _add_params(p, Algorithm.ICP)
    p.add_argument("--out", required=True, help="per-entry CSV (rotation curve first)")
    p.add_argument("--table", help="min/max/mean/std CSV")
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("serve", help="run the TCP referencing service")
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--algorithm", choices=[a.value for a in Algorithm], default="icp")
    p.add_argument("--model")
    for flag, (key, typ) in _PARAM_FLAGS.items():
        p.add_argument(f"--{flag}", dest=key, type=typ)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        alg = Algorithm(args.algorithm)
        for key in PARAMS[alg]:
            if getattr(args, key, None) is None:
                setattr(args, key, PARAMS[alg][key])
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"hmdref: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReferencingError as exc:
        # registration failures are handled per command; what reaches here is bad input
        print(f"hmdref: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
