"""Seed-guided referencing: crop around the user's seed, optionally smooth, run ICP."""

from __future__ import annotations

from dataclasses import dataclass

from .geom import PointCloud
from .icp import IcpConfig, RegistrationResult, SeedPose, register_icp, seed_to_transform
from .preprocess import CropConfig, MlsConfig, mls_smooth, sphere_crop


@dataclass(frozen=True)
class SeedPipelineConfig:
    crop_radius: float = 2.0
    mls: MlsConfig | None = None
    icp: IcpConfig = IcpConfig()


def reference_from_seed(
    scene: PointCloud,
    model: PointCloud,
    seed: SeedPose,
    cfg: SeedPipelineConfig = SeedPipelineConfig(),
) -> RegistrationResult:
    """Register ``model`` into ``scene`` starting from a user-placed seed.

    The scene is cut to a sphere of ``crop_radius`` around the seed
    position, smoothed with MLS when configured, then ICP starts from the
    seed pose (model origin at the seed position, heading = seed yaw).
    """
    local = sphere_crop(scene, CropConfig(seed.position, cfg.crop_radius))
    if cfg.mls is not None and len(local):
        local = mls_smooth(local, cfg.mls)
    res = register_icp(model, local, seed_to_transform(seed), cfg.icp)
    return RegistrationResult(res.transform, res.rms_mm, res.iterations_used, res.converged, dict(res.info, scene_points=len(local)))
