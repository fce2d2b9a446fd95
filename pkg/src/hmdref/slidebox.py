"""Sliding-box robot detection.

A model-sized axis-aligned box is stepped over the scene; each placement
holding enough points is scored by matching its descriptors against the
model's, and the best box seeds a four-start ICP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptors import Descriptor, DescriptorSet, fpfh_at, global_signature, spfh
from .errors import NoCandidateBox, TooFewPoints
from .geom import Aabb, PointCloud
from .icp import IcpConfig, RegistrationResult, register_icp_4rot
from .kdtree import KdTree
from .preprocess import estimate_normals, voxel_representatives


@dataclass(frozen=True)
class DetectionConfig:
    step_fraction: float = 0.2
    min_points: int = 3
    descriptor: Descriptor = Descriptor.LOCAL_HISTOGRAM
    keypoint_voxel: float = 0.05
    match_ratio_max: float = 0.8
    planar: bool = False
    feature_radius: float = 0.15
    normal_k: int = 20

    def __post_init__(self):
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must lie in (0, 1]")
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        if not (self.keypoint_voxel > 0 and self.feature_radius > 0):
            raise ValueError("keypoint_voxel and feature_radius must be positive")
        if not self.match_ratio_max > 0:
            raise ValueError("match_ratio_max must be positive")


@dataclass(frozen=True, eq=False)
class BoxCandidate:
    box: Aabb
    point_indices: np.ndarray
    grid_index: int
    match_score: float = 0.0

    def scored(self, score: float) -> "BoxCandidate":
        return BoxCandidate(self.box, self.point_indices, self.grid_index, float(score))


def _with_normals(cloud: PointCloud, cfg: DetectionConfig) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, cfg.normal_k)


def compute_descriptors(cloud: PointCloud, cfg: DetectionConfig) -> DescriptorSet:
    """Descriptors of a whole cloud (the model, or a cut-out scene region).

    Local mode keys one histogram to the point nearest each occupied
    ``keypoint_voxel`` centroid. Global mode returns a single row keyed to
    the centroid.
    """
    if cfg.descriptor is Descriptor.LOCAL_HISTOGRAM and len(cloud) < 10:
        raise TooFewPoints(f"local descriptors need >= 10 points (have {len(cloud)})")
    if len(cloud) <= cfg.normal_k and cloud.normals is None:
        raise TooFewPoints(f"normal estimation needs more than {cfg.normal_k} points")
    cloud = _with_normals(cloud, cfg)
    if cfg.descriptor is Descriptor.GLOBAL_SIGNATURE:
        return DescriptorSet(PointCloud(cloud.centroid()[None, :]), global_signature(cloud, _global_scale(cloud)))
    tree = KdTree(cloud.points)
    keys = voxel_representatives(cloud.points, cfg.keypoint_voxel)
    sp = spfh(cloud, cfg.feature_radius, tree)
    return DescriptorSet(cloud.subset(keys), fpfh_at(cloud, keys, cfg.feature_radius, sp, tree))


def _global_scale(cloud: PointCloud) -> float:
    return max(cloud.bounds().diagonal, 1e-9)


def _axis_starts(lo: float, hi: float, side: float, step: float) -> np.ndarray:
    if side <= 0 or hi - lo <= side:
        return np.array([lo])
    n = int(np.ceil((hi - lo - side) / step - 1e-12))
    return lo + step * np.arange(n + 1)


def slide_boxes(scene: PointCloud, model_box: Aabb, cfg: DetectionConfig) -> list[BoxCandidate]:
    """Model-sized boxes on a grid anchored at the scene minimum.

    Steps are ``step_fraction`` of the box side per axis; the last row on
    each axis reaches the scene maximum. In planar mode the box spans the
    scene's full height and only slides horizontally. Boxes with fewer
    than ``min_points`` points (bounds inclusive) are dropped.
    """
    if len(scene) == 0:
        return []
    b = scene.bounds()
    side = model_box.sides.copy()
    if cfg.planar:
        side[2] = max(side[2], b.sides[2])
    axes = [_axis_starts(b.min[k], b.max[k], side[k], cfg.step_fraction * side[k]) for k in range(3)]
    pts = scene.points
    out = []
    g = 0
    for x0 in axes[0]:
        inx = np.flatnonzero((pts[:, 0] >= x0) & (pts[:, 0] <= x0 + side[0]))
        px = pts[inx]
        for y0 in axes[1]:
            iny = (px[:, 1] >= y0) & (px[:, 1] <= y0 + side[1])
            for z0 in axes[2]:
                lo = np.array([x0, y0, z0])
                sel = inx[iny & (px[:, 2] >= z0) & (px[:, 2] <= z0 + side[2])]
                if len(sel) >= cfg.min_points:
                    out.append(BoxCandidate(Aabb(lo, lo + side), sel, g))
                g += 1
    return out


@dataclass
class SceneFeatures:
    """Scene-wide descriptor cache shared by all candidates.

    Histograms are computed once on the full scene, so a keypoint near a
    box wall sees its true neighbourhood rather than a clipped one.
    """

    cloud: PointCloud
    key_index: np.ndarray
    descriptors: np.ndarray

    @classmethod
    def build(cls, scene: PointCloud, cfg: DetectionConfig) -> "SceneFeatures":
        cloud = _with_normals(scene, cfg)
        if cfg.descriptor is Descriptor.GLOBAL_SIGNATURE:
            return cls(cloud, np.empty(0, np.int64), np.empty((0, 0)))
        tree = KdTree(cloud.points)
        keys = voxel_representatives(cloud.points, cfg.keypoint_voxel)
        sp = spfh(cloud, cfg.feature_radius, tree)
        return cls(cloud, keys, fpfh_at(cloud, keys, cfg.feature_radius, sp, tree))


def match_count(query: np.ndarray, model: np.ndarray, ratio_max: float) -> int:
    """Mutual nearest neighbours in descriptor space that pass the ratio test."""
    if len(query) == 0 or len(model) == 0:
        return 0
    d2 = (
        np.einsum("ij,ij->i", query, query)[:, None]
        + np.einsum("ij,ij->i", model, model)[None, :]
        - 2.0 * query @ model.T
    )
    np.maximum(d2, 0.0, out=d2)
    nn = np.argmin(d2, axis=1)
    back = np.argmin(d2, axis=0)
    mutual = back[nn] == np.arange(len(query))
    if len(model) < 2:
        return int(np.count_nonzero(mutual))
    two = np.partition(d2, 1, axis=1)[:, :2]
    d1, dsec = np.sqrt(two[:, 0]), np.sqrt(two[:, 1])
    passes = d1 <= ratio_max * dsec
    return int(np.count_nonzero(mutual & passes))


def score_candidates(
    candidates: list[BoxCandidate],
    scene: PointCloud,
    model_desc: DescriptorSet,
    cfg: DetectionConfig,
    features: SceneFeatures | None = None,
) -> list[BoxCandidate]:
    """Score each box against the model and sort best first (ties: grid order)."""
    if len(model_desc) == 0:
        raise ValueError("model descriptor set is empty")
    if not candidates:
        return []
    feats = features if features is not None else SceneFeatures.build(scene, cfg)
    scored = []
    if cfg.descriptor is Descriptor.GLOBAL_SIGNATURE:
        ref = model_desc.descriptors[0]
        for c in candidates:
            sub = feats.cloud.subset(c.point_indices)
            sig = global_signature(sub, _global_scale(sub))[0]
            scored.append(c.scored(1.0 - 0.5 * float(np.abs(sig - ref).sum())))
    else:
        in_key = np.zeros(len(feats.cloud), bool)
        key_pos = np.full(len(feats.cloud), -1, np.int64)
        key_pos[feats.key_index] = np.arange(len(feats.key_index))
        in_key[feats.key_index] = True
        m = len(model_desc)
        for c in candidates:
            rows = key_pos[c.point_indices[in_key[c.point_indices]]]
            n = match_count(feats.descriptors[rows], model_desc.descriptors, cfg.match_ratio_max)
            scored.append(c.scored(n / m))
    scored.sort(key=lambda c: (-c.match_score, c.grid_index))
    return scored


def detection_box(model: PointCloud) -> Aabb:
    """Axis-aligned box that holds the model at any yaw about its box centre."""
    b = model.bounds()
    c = b.center
    r = float(np.max(np.hypot(model.points[:, 0] - c[0], model.points[:, 1] - c[1])))
    lo = np.array([c[0] - r, c[1] - r, b.min[2]])
    hi = np.array([c[0] + r, c[1] + r, b.max[2]])
    return Aabb(lo, hi)


def detect_robot(
    scene: PointCloud,
    model: PointCloud,
    cfg: DetectionConfig = DetectionConfig(),
    icp_cfg: IcpConfig = IcpConfig(),
) -> RegistrationResult:
    """Pick the best-matching box and refine from its centre with four-start ICP.

    Match counts are small integers, so neighbouring placements often tie
    for the top score. The ICP centre is the mean centre of every box
    sharing that score, which sits over the matched structure instead of
    at the grid-order corner of the tie. The returned ``info`` carries the
    winning box (``"box"``), its score and the number of tied boxes.
    """
    if len(scene) == 0:
        raise NoCandidateBox("scene is empty")
    model_desc = compute_descriptors(model, cfg)
    cands = slide_boxes(scene, detection_box(model), cfg)
    if not cands:
        raise NoCandidateBox("no box holds enough points")
    ranked = score_candidates(cands, scene, model_desc, cfg)
    best = ranked[0]
    top = [c for c in ranked if c.match_score == best.match_score]
    center = np.mean([c.box.center for c in top], axis=0)
    center[2] = best.box.min[2] + 0.5 * model.bounds().sides[2]
    res = register_icp_4rot(model, scene, center, icp_cfg)
    info = dict(
        res.info,
        box=best.box,
        box_score=best.match_score,
        box_grid_index=best.grid_index,
        tied_boxes=len(top),
        icp_center=center,
    )
    return RegistrationResult(res.transform, res.rms_mm, res.iterations_used, res.converged, info)
