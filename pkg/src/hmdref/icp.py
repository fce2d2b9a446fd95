"""Point-to-point ICP and the four-start yaw wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllStartsFailed, EmptyCloud, NoCorrespondences
from .geom import PointCloud, RigidTransform, best_rigid_fit, pose_error, rot_z, rotation_angle, wrap_angle
from .kdtree import KdTree


@dataclass(frozen=True)
class SeedPose:
    """User-placed coarse pose: robot base position and heading about z."""

    position: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in np.asarray(self.position).reshape(3)))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class IcpConfig:
    max_correspondence_distance: float = 0.1
    max_iterations: int = 500
    translation_epsilon: float = 1e-6
    rms_epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("max_correspondence_distance", "max_iterations", "translation_epsilon", "rms_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    rms_mm: float
    iterations_used: int
    converged: bool
    info: dict = field(default_factory=dict)


def seed_to_transform(seed: SeedPose) -> RigidTransform:
    return RigidTransform(rot_z(seed.yaw), seed.position)


def transform_to_seed(t: RigidTransform) -> SeedPose:
    return SeedPose(tuple(t.translation), t.yaw())


def register_icp(
    model: PointCloud,
    scene: PointCloud,
    init: RigidTransform,
    cfg: IcpConfig,
    scene_tree: KdTree | None = None,
) -> RegistrationResult:
    """Align ``model`` to ``scene`` starting from ``init``.

    Each iteration pairs every moved model point with its nearest scene
    point within ``max_correspondence_distance`` and applies the closed-form
    rigid fit of those pairs. Stops when the update's translation (and
    rotation, in radians) fall below ``translation_epsilon`` or the RMS
    changes by less than ``rms_epsilon`` mm.
    """
    if len(model) == 0 or len(scene) == 0:
        raise EmptyCloud("ICP needs non-empty model and scene")
    tree = scene_tree if scene_tree is not None else KdTree(scene.points)
    src = model.points
    dst = tree.points
    gate = cfg.max_correspondence_distance
    T = init
    prev_rms = np.inf
    converged = False
    it = 0
    idx = None
    while it < cfg.max_iterations:
        moved = T.apply(src)
        idx, d = tree.query(moved, gate, hint=idx)
        ok = idx >= 0
        n_ok = int(np.count_nonzero(ok))
        if n_ok == 0 and it == 0:
            raise NoCorrespondences(f"no scene point within {gate} m of the initial model pose")
        if n_ok < 3:
            break
        rms = float(np.sqrt(np.mean(d[ok] ** 2)) * 1000.0)
        step = best_rigid_fit(moved[ok], dst[idx[ok]])
        T = step @ T
        it += 1
        dtrans = float(np.linalg.norm(step.translation))
        drot = float(np.arccos(np.clip((np.trace(step.rotation) - 1.0) / 2.0, -1.0, 1.0)))
        if (dtrans < cfg.translation_epsilon and drot < cfg.translation_epsilon) or abs(
            prev_rms - rms
        ) < cfg.rms_epsilon:
            converged = True
            break
        prev_rms = rms
    idx, d = tree.query(T.apply(src), gate, hint=idx)
    ok = idx >= 0
    n_ok = int(np.count_nonzero(ok))
    if n_ok < 3:
        converged = False
    final = float(np.sqrt(np.mean(d[ok] ** 2)) * 1000.0) if n_ok else float("inf")
    return RegistrationResult(T, final, it, converged, {"fitness": n_ok / len(src)})


START_YAWS_DEG = (0.0, 90.0, 180.0, 270.0)
SAME_OPTIMUM_M = 0.005
SAME_OPTIMUM_DEG = 1.0


def four_start_inits(model: PointCloud, center) -> list[RigidTransform]:
    """Inits placing the model's box centre at ``center``, yawed 0/90/180/270 deg."""
    c_model = model.bounds().center
    center = np.asarray(center, dtype=np.float64)
    out = []
    for deg in START_YAWS_DEG:
        R = rot_z(np.radians(deg))
        out.append(RigidTransform(R, center - R @ c_model))
    return out


def register_icp_4rot(
    model: PointCloud,
    scene: PointCloud,
    center,
    cfg: IcpConfig,
    scene_tree: KdTree | None = None,
) -> RegistrationResult:
    """Run ICP from four yaw starts about ``center`` and keep the best converged run.

    Runs that end within ``SAME_OPTIMUM_M`` / ``SAME_OPTIMUM_DEG`` of the
    lowest-rms run (pose compared at the model's box centre) reached the same
    optimum from different starts; among those the start that had to rotate
    least wins, then the lower yaw index.
    """
    if len(model) == 0 or len(scene) == 0:
        raise EmptyCloud("ICP needs non-empty model and scene")
    tree = scene_tree if scene_tree is not None else KdTree(scene.points)
    results: list[RegistrationResult | None] = []
    travel: list[float] = []
    for init in four_start_inits(model, center):
        try:
            res = register_icp(model, scene, init, cfg, tree)
        except NoCorrespondences:
            res = None
        results.append(res if res is not None and res.converged else None)
        travel.append(
            rotation_angle(res.transform.rotation @ init.rotation.T) if res is not None else np.inf
        )
    ok = [k for k, r in enumerate(results) if r is not None]
    if not ok:
        raise AllStartsFailed("no ICP start converged")
    kbest = min(ok, key=lambda j: (results[j].rms_mm, j))
    pivot = model.bounds().center
    tied = []
    for j in ok:
        dt, dr = pose_error(results[j].transform, results[kbest].transform, pivot)
        if dt <= SAME_OPTIMUM_M and dr <= SAME_OPTIMUM_DEG:
            tied.append(j)
    k = min(tied, key=lambda j: (travel[j], j))
    res = results[k]
    info = dict(
        res.info,
        start_yaw_deg=START_YAWS_DEG[k],
        start_index=k,
        start_rms_mm=[None if r is None else r.rms_mm for r in results],
    )
    return RegistrationResult(res.transform, res.rms_mm, res.iterations_used, True, info)
