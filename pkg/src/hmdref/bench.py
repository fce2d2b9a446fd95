"""Parameter sweeps and seed-robustness experiments.

A sweep runs one algorithm over the Cartesian product of its parameter
grids on every listed scene and writes one CSV row per (scene, setting).
Rows are keyed by ``(scene_index, combo_index)`` and always written in key
order, so a rerun with the same spec reproduces the file byte for byte.
Wall time is left out of the CSV unless asked for, for the same reason.

Sweep files are YAML::

    algorithm: icp            # icp | fourpcs | slidebox
    cloud_size: small         # small (16k samples) | big (256k)
    scenes: ["desk:0", "desk:1", "scenes/lab.yaml"]
    guess: {sigma_pos: 0.1, sigma_yaw_deg: 20.0, seed: 0}
    grid:
      max_corr_dist: [0.1, 1.0]
      max_iter: [50, 500]
      mls_method: [none, voxel_grid]

Scene references are ``preset:seed`` (presets: desk, isolated, merged,
clutter) or a path to a scene YAML file.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .coarse4pcs import FourPcsConfig, segment_then_register
from .errors import ReferencingError
from .geom import PointCloud, RigidTransform, pose_error
from .icp import IcpConfig, SeedPose, seed_to_transform
from .kdtree import KdTree
from .pipeline import SeedPipelineConfig, reference_from_seed
from .preprocess import MlsConfig, Upsampling
from .scene_synth import (
    BIG_SAMPLES,
    SMALL_SAMPLES,
    PerturbationGrid,
    SceneSpec,
    clutter_scene,
    desk_scene,
    isolated_scene,
    load_scene_spec,
    merged_table_scene,
    perturb_seed,
    robot_model_cloud,
    simulate_user_guess,
    synthesize_scene,
)
from .slidebox import DetectionConfig, detect_robot

SUCCESS_MM = 10.0
SUCCESS_DEG = 2.0


class Algorithm(enum.Enum):
    ICP = "icp"
    FOURPCS = "fourpcs"
    SLIDEBOX = "slidebox"


class CloudSize(enum.Enum):
    SMALL = "small"
    BIG = "big"

    @property
    def samples(self) -> int:
        return SMALL_SAMPLES if self is CloudSize.SMALL else BIG_SAMPLES


# defaults per algorithm; grid keys must come from these
PARAMS: dict[Algorithm, dict[str, object]] = {
    Algorithm.ICP: {
        "max_corr_dist": 0.1,
        "max_iter": 500,
        "mls_method": "none",
        "mls_radius": 0.05,
        "mls_param": 0.05,
        "crop_radius": 2.0,
    },
    Algorithm.FOURPCS: {
        "overlap": 0.5,
        "delta": 0.01,
        "sample_size": 400,
        "max_bases": 200,
        "max_corr_dist": 0.05,
        "max_iter": 200,
    },
    Algorithm.SLIDEBOX: {
        "step_fraction": 0.2,
        "min_points": 3,
        "keypoint_voxel": 0.05,
        "match_ratio_max": 0.8,
        "feature_radius": 0.15,
        "max_corr_dist": 1.0,
        "max_iter": 500,
    },
}

PRESETS = {
    "desk": desk_scene,
    "isolated": isolated_scene,
    "merged": merged_table_scene,
    "clutter": clutter_scene,
}


def resolve_scene(ref: str, size: CloudSize | None = None) -> SceneSpec:
    """``preset:seed`` or a YAML path; ``size`` overrides the sample count."""
    name, _, seed = ref.partition(":")
    if name in PRESETS and seed.lstrip("-").isdigit():
        spec = PRESETS[name](int(seed))
    else:
        spec = load_scene_spec(ref)
    if size is not None:
        spec = spec.replace(samples_total=size.samples)
    return spec


@dataclass(frozen=True)
class GuessModel:
    """How the initial seed of each ICP row is drawn (a simulated user guess)."""

    sigma_pos: float = 0.1
    sigma_yaw_deg: float = 20.0
    seed: int = 0


@dataclass
class SweepSpec:
    algorithm: Algorithm
    grid: dict[str, list]
    cloud_size: CloudSize = CloudSize.SMALL
    scenes: list[str] = field(default_factory=lambda: ["desk:0"])
    guess: GuessModel = GuessModel()
    model_points: int = 3000

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        self.cloud_size = CloudSize(self.cloud_size)
        if not self.grid or any(not list(v) for v in self.grid.values()):
            raise ValueError("every grid axis needs at least one value")
        unknown = set(self.grid) - set(PARAMS[self.algorithm])
        if unknown:
            raise ValueError(f"unknown parameter(s) for {self.algorithm.value}: {sorted(unknown)}")
        if not self.scenes:
            raise ValueError("sweep needs at least one scene")

    def combos(self) -> list[dict]:
        keys = list(self.grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.grid[k] for k in keys))]

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        g = d.get("guess", {}) or {}
        return cls(
            algorithm=Algorithm(d["algorithm"]),
            grid={k: list(v) for k, v in (d.get("grid") or {}).items()},
            cloud_size=CloudSize(d.get("cloud_size", "small")),
            scenes=[str(s) for s in d.get("scenes", ["desk:0"])],
            guess=GuessModel(float(g.get("sigma_pos", 0.1)), float(g.get("sigma_yaw_deg", 20.0)), int(g.get("seed", 0))),
            model_points=int(d.get("model_points", 3000)),
        )

    @classmethod
    def load(cls, path) -> "SweepSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class SweepRow:
    scene_index: int
    combo_index: int
    algorithm: str
    size: str
    scene: str
    params: dict
    rms_mm: float
    converged: bool
    trans_err_mm: float
    rot_err_deg: float
    error: str = ""
    wall_time_ms: float = float("nan")

    @property
    def key(self) -> tuple[int, int]:
        return (self.scene_index, self.combo_index)


def _full_params(alg: Algorithm, combo: dict) -> dict:
    p = dict(PARAMS[alg])
    p.update(combo)
    return p


def icp_from_params(p: dict) -> IcpConfig:
    return IcpConfig(float(p["max_corr_dist"]), int(p["max_iter"]))


def seed_pipeline_from_params(p: dict) -> SeedPipelineConfig:
    return SeedPipelineConfig(float(p["crop_radius"]), mls_from_params(p), icp_from_params(p))


def mls_from_params(p: dict) -> MlsConfig | None:
    method = str(p.get("mls_method", "none"))
    if method in ("none", "no", ""):
        return None
    if method == "mls":
        return MlsConfig(float(p["mls_radius"]))
    return MlsConfig(float(p["mls_radius"]), upsampling=Upsampling(method), upsample_param=float(p["mls_param"]))


def run_one(alg: Algorithm, p: dict, scene: PointCloud, model: PointCloud, seed: SeedPose, rng_seed: int = 0):
    """Run one configured registration; returns its RegistrationResult.

    ``seed`` is used by ICP only; ``rng_seed`` drives 4PCS base sampling.
    """
    if alg is Algorithm.ICP:
        return reference_from_seed(scene, model, seed, seed_pipeline_from_params(p))
    if alg is Algorithm.FOURPCS:
        fcfg = FourPcsConfig(float(p["overlap"]), float(p["delta"]), int(p["sample_size"]), int(p["max_bases"]), rng_seed=rng_seed)
        return segment_then_register(scene, model, cfg=fcfg, icp_cfg=icp_from_params(p))
    dcfg = DetectionConfig(
        step_fraction=float(p["step_fraction"]),
        min_points=int(p["min_points"]),
        keypoint_voxel=float(p["keypoint_voxel"]),
        match_ratio_max=float(p["match_ratio_max"]),
        feature_radius=float(p["feature_radius"]),
    )
    return detect_robot(scene, model, dcfg, icp_from_params(p))


# -- CSV -------------------------------------------------------------------

_FIXED = ["scene_index", "combo_index", "algorithm", "size", "scene"]
_RESULT = ["rms_mm", "converged", "trans_err_mm", "rot_err_deg", "error"]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(s: str):
    if s in ("true", "false"):
        return s == "true"
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def rows_to_csv(rows: list[SweepRow], param_names: list[str], timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = _FIXED + param_names + _RESULT + (["wall_time_ms"] if timing else [])
    w.writerow(header)
    for r in sorted(rows, key=lambda r: r.key):
        vals = [r.scene_index, r.combo_index, r.algorithm, r.size, r.scene]
        vals += [r.params[k] for k in param_names]
        vals += [r.rms_mm, r.converged, r.trans_err_mm, r.rot_err_deg, r.error]
        if timing:
            vals.append(r.wall_time_ms)
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[SweepRow]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    p_lo = len(_FIXED)
    p_hi = header.index("rms_mm")
    names = header[p_lo:p_hi]
    out = []
    for rec in rd:
        d = dict(zip(header, rec))
        out.append(
            SweepRow(
                int(d["scene_index"]),
                int(d["combo_index"]),
                d["algorithm"],
                d["size"],
                d["scene"],
                {k: _parse_value(d[k]) for k in names},
                float(d["rms_mm"]),
                d["converged"] == "true",
                float(d["trans_err_mm"]),
                float(d["rot_err_deg"]),
                d["error"],
                float(d["wall_time_ms"]) if "wall_time_ms" in d else float("nan"),
            )
        )
    return out


# -- summary ---------------------------------------------------------------


@dataclass
class SummaryRow:
    algorithm: str
    size: str
    rows: int
    converged: int
    failed: int
    min: float
    max: float
    mean: float
    std: float


def summarize(rows: list[SweepRow]) -> list[SummaryRow]:
    """Min/max/mean/std of rms over converged rows per (algorithm, size).

    Rows that errored or did not converge are excluded from the statistics
    and counted in ``failed``. ``std`` is the population standard deviation.
    """
    out = []
    groups: dict[tuple[str, str], list[SweepRow]] = {}
    for r in sorted(rows, key=lambda r: r.key):
        groups.setdefault((r.algorithm, r.size), []).append(r)
    for (alg, size), rs in groups.items():
        ok = np.array([r.rms_mm for r in rs if r.converged and not r.error], dtype=np.float64)
        if len(ok):
            stats = (float(ok.min()), float(ok.max()), float(ok.mean()), float(ok.std()))
        else:
            stats = (math.nan,) * 4
        out.append(SummaryRow(alg, size, len(rs), len(ok), len(rs) - len(ok), *stats))
    return out


def summary_to_csv(summary: list[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "size", "rows", "converged", "failed", "min_rms_mm", "max_rms_mm", "mean_rms_mm", "std_rms_mm"])
    for s in summary:
        w.writerow([_fmt(v) for v in (s.algorithm, s.size, s.rows, s.converged, s.failed, s.min, s.max, s.mean, s.std)])
    return buf.getvalue()


# -- sweep -----------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[SweepRow]
    summary: list[SummaryRow]
    param_names: list[str]

    @property
    def errors(self) -> int:
        return sum(1 for r in self.rows if r.error)


def run_sweep(spec: SweepSpec, out_csv=None, summary_csv=None, timing: bool = False, resume: bool = True) -> SweepResult:
    """Execute every (scene, setting) pair; failures become rows, never exceptions.

    With ``out_csv`` set and ``resume`` true, rows already present in that
    file are reused rather than recomputed.
    """
    combos = spec.combos()
    names = list(PARAMS[spec.algorithm])
    done: dict[tuple[int, int], SweepRow] = {}
    if out_csv is not None and resume and Path(out_csv).exists():
        try:
            for r in rows_from_csv(Path(out_csv).read_text()):
                done[r.key] = r
        except (ValueError, KeyError, StopIteration):
            done = {}
    model = robot_model_cloud(spec.model_points)
    rows = []
    for si, ref in enumerate(spec.scenes):
        need = [ci for ci in range(len(combos)) if (si, ci) not in done]
        if need:
            sspec = resolve_scene(ref, spec.cloud_size)
            scene, truth = synthesize_scene(sspec)
            seed = simulate_user_guess(
                truth, spec.guess.sigma_pos, np.radians(spec.guess.sigma_yaw_deg), spec.guess.seed + si
            )
        for ci, combo in enumerate(combos):
            if (si, ci) in done:
                rows.append(done[(si, ci)])
                continue
            p = _full_params(spec.algorithm, combo)
            t0 = time.perf_counter()
            try:
                res = run_one(spec.algorithm, p, scene, model, seed)
                te, re_ = pose_error(res.transform, truth, model.centroid())
                row = SweepRow(si, ci, spec.algorithm.value, spec.cloud_size.value, ref, p, float(res.rms_mm), bool(res.converged), te * 1000.0, re_)
            except ReferencingError as exc:
                row = SweepRow(si, ci, spec.algorithm.value, spec.cloud_size.value, ref, p, math.inf, False, math.nan, math.nan, exc.code)
            row.wall_time_ms = (time.perf_counter() - t0) * 1000.0
            rows.append(row)
    rows.sort(key=lambda r: r.key)
    summary = summarize(rows)
    if out_csv is not None:
        Path(out_csv).write_text(rows_to_csv(rows, names, timing))
    if summary_csv is not None:
        Path(summary_csv).write_text(summary_to_csv(summary))
    return SweepResult(rows, summary, names)


# -- robustness ------------------------------------------------------------


@dataclass
class RobustnessEntry:
    kind: str  # "rotation" | "translation"
    offset_yaw_deg: float
    offset: tuple
    guess_rms_mm: float
    rms_mm: float
    converged: bool
    trans_err_mm: float
    rot_err_deg: float
    error: str = ""

    @property
    def success(self) -> bool:
        return self.converged and self.trans_err_mm < SUCCESS_MM and self.rot_err_deg < SUCCESS_DEG


@dataclass
class RobustnessResult:
    rotation: list[RobustnessEntry]
    translation: list[RobustnessEntry]

    def curve(self) -> list[tuple[float, float, bool]]:
        """(yaw offset in degrees, final rms, success) per rotation entry."""
        return [(e.offset_yaw_deg, e.rms_mm, e.success) for e in self.rotation]

    def table(self) -> list[tuple[str, float, float, float, float]]:
        """(label, min, max, mean, std) rows; ICP rows cover converged runs only."""

        def stats(vals):
            a = np.asarray([v for v in vals if np.isfinite(v)], dtype=np.float64)
            if not len(a):
                return (math.nan,) * 4
            return (float(a.min()), float(a.max()), float(a.mean()), float(a.std()))

        allv = self.rotation + self.translation
        return [
            ("user guess", *stats(e.guess_rms_mm for e in allv)),
            ("icp rotation", *stats(e.rms_mm for e in self.rotation if e.converged)),
            ("icp translation", *stats(e.rms_mm for e in self.translation if e.converged)),
            ("icp all", *stats(e.rms_mm for e in allv if e.converged)),
        ]


def guess_rms_mm(model: PointCloud, scene_tree: KdTree, seed: SeedPose) -> float:
    """RMS of the raw seed pose, before any refinement."""
    moved = seed_to_transform(seed).apply(model.points)
    _, d = scene_tree.query(moved)
    return float(np.sqrt(np.mean(d * d)) * 1000.0)


def _entry(kind, yaw_deg, off, scene, scene_tree, truth, model, seed, cfg) -> RobustnessEntry:
    g = guess_rms_mm(model, scene_tree, seed)
    try:
        res = reference_from_seed(scene, model, seed, cfg)
    except ReferencingError as exc:
        return RobustnessEntry(kind, yaw_deg, off, g, math.inf, False, math.nan, math.nan, exc.code)
    te, re_ = pose_error(res.transform, truth, model.centroid())
    return RobustnessEntry(kind, yaw_deg, off, g, float(res.rms_mm), bool(res.converged), te * 1000.0, re_)


def run_robustness(
    scene: PointCloud,
    truth: RigidTransform,
    model: PointCloud,
    grid: PerturbationGrid = PerturbationGrid(),
    cfg: SeedPipelineConfig = SeedPipelineConfig(),
    max_offset: float | None = None,
    rotations: bool = True,
    translations: bool = True,
) -> RobustnessResult:
    """Refine from every perturbed seed of ``grid`` around the true pose.

    ``max_offset`` keeps only translation offsets with Euclidean norm at or
    below it (the full grid is 11^3 runs).
    """
    sweep = perturb_seed(truth, grid)
    tree = KdTree(scene.points)
    rot, tra = [], []
    if rotations:
        for a, seed in zip(sweep.rotation_offsets, sweep.rotation):
            deg = float(np.degrees(a))
            rot.append(_entry("rotation", deg, (0.0, 0.0, 0.0), scene, tree, truth, model, seed, cfg))
    if translations:
        for off, seed in zip(sweep.translation_offsets, sweep.translation):
            if max_offset is not None and np.linalg.norm(off) > max_offset + 1e-9:
                continue
            tra.append(_entry("translation", 0.0, tuple(float(v) for v in off), scene, tree, truth, model, seed, cfg))
    return RobustnessResult(rot, tra)


def robustness_to_csv(res: RobustnessResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "yaw_offset_deg", "dx", "dy", "dz", "guess_rms_mm", "rms_mm", "converged", "trans_err_mm", "rot_err_deg", "success", "error"])
    for e in res.rotation + res.translation:
        w.writerow(
            [_fmt(v) for v in (e.kind, e.offset_yaw_deg, *e.offset, e.guess_rms_mm, e.rms_mm, e.converged, e.trans_err_mm, e.rot_err_deg, e.success, e.error)]
        )
    return buf.getvalue()


def robustness_table_csv(res: RobustnessResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "min_rms_mm", "max_rms_mm", "mean_rms_mm", "std_rms_mm"])
    for row in res.table():
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()
