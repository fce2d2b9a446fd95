"""Synthetic HMD-like scenes with exact ground truth.

A scene is a set of closed triangle meshes (the posed robot plus clutter
primitives) that is area-sampled into one point cloud and perturbed with
isotropic Gaussian noise, standing in for a sampled spatial-mapping mesh.

Scene config files are YAML::

    robot: builtin              # or a path to an ASCII PLY mesh
    robot_pose: {position: [0.1, -0.2, 0.0], yaw_deg: 35.0}
    clutter:
      - {type: plane, position: [0, 0, 0], yaw_deg: 0, dims: [1.6, 1.6]}
      - {type: box, position: [1.0, 0.2, 0.74], yaw_deg: 10, dims: [0.9, 0.6, 0.04]}
      - {type: cylinder, position: [-1, 0, 0.4], yaw_deg: 0, dims: [0.2, 0.8]}
    noise_sigma: 0.005
    samples_total: 16000
    rng_seed: 3

Every primitive is centred on ``position``: boxes take ``[sx, sy, sz]``,
planes ``[sx, sy]`` (horizontal, facing +z), cylinders ``[radius,
height]`` with a vertical axis. A pose may be given as ``matrix`` (4x4,
row-major) instead of ``position``/``yaw_deg``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .cloud_io import SamplingConfig, TriangleMesh, load_mesh, sample_mesh
from .geom import PointCloud, RigidTransform, rot_z, rotation_from_axis_angle
from .icp import SeedPose

SMALL_SAMPLES = 16_000
BIG_SAMPLES = 256_000

# -- primitives ------------------------------------------------------------


def box_mesh(dims, pose: RigidTransform | None = None) -> TriangleMesh:
    sx, sy, sz = (0.5 * float(d) for d in dims)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # vertex index = 4*ix + 2*iy + iz ; faces wound outward
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ]
    )
    m = TriangleMesh(v, f)
    return m.transformed(pose) if pose is not None else m


def cylinder_mesh(radius: float, height: float, pose: RigidTransform | None = None, segments: int = 32) -> TriangleMesh:
    """Closed cylinder along z, centred at the origin."""
    a = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.column_stack([radius * np.cos(a), radius * np.sin(a)])
    h = 0.5 * height
    bottom = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    v = np.vstack([bottom, top, [[0.0, 0.0, -h], [0.0, 0.0, h]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f += [[i, j, segments + j], [i, segments + j, segments + i]]
        f += [[cb, j, i], [ct, segments + i, segments + j]]
    m = TriangleMesh(v, np.array(f))
    return m.transformed(pose) if pose is not None else m


def plane_mesh(dims, pose: RigidTransform | None = None) -> TriangleMesh:
    sx, sy = 0.5 * float(dims[0]), 0.5 * float(dims[1])
    v = np.array([[-sx, -sy, 0.0], [sx, -sy, 0.0], [sx, sy, 0.0], [-sx, sy, 0.0]])
    m = TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))
    return m.transformed(pose) if pose is not None else m


def _at(x, y, z, R=None) -> RigidTransform:
    return RigidTransform(np.eye(3) if R is None else R, (x, y, z))


@lru_cache(maxsize=1)
def robot_mesh() -> TriangleMesh:
    """The bundled six-link manipulator in a fixed joint configuration.

    Model frame: base centre on the floor at the origin, z up, the arm
    reaching along +x. Links are closed primitives; the arm is offset to
    +y so the shape has no mirror symmetry.
    """
    about_x = rotation_from_axis_angle((1, 0, 0), np.pi / 2)
    about_y = rotation_from_axis_angle((0, 1, 0), np.pi / 2)
    parts = [
        cylinder_mesh(0.16, 0.12, _at(0.0, 0.0, 0.06)),  # base
        cylinder_mesh(0.11, 0.25, _at(0.0, 0.0, 0.245)),  # column
        box_mesh((0.30, 0.24, 0.18), _at(0.04, 0.0, 0.43)),  # shoulder
        box_mesh((0.12, 0.12, 0.55), _at(0.10, 0.15, 0.70)),  # upper arm
        cylinder_mesh(0.08, 0.22, _at(0.10, 0.10, 1.00, about_x)),  # elbow
        box_mesh((0.55, 0.10, 0.10), _at(0.40, 0.10, 1.04)),  # forearm
        cylinder_mesh(0.05, 0.12, _at(0.735, 0.10, 1.04, about_y)),  # wrist
        box_mesh((0.06, 0.06, 0.12), _at(0.82, 0.10, 0.99)),  # tool
    ]
    return TriangleMesh.merge(parts)


def robot_model_cloud(n: int = 3000, seed: int = 12345) -> PointCloud:
    """Dense noiseless sample of the bundled robot, used as the ICP model."""
    return sample_mesh(robot_mesh(), SamplingConfig(n, seed))


# -- scene spec ------------------------------------------------------------


class Primitive(enum.Enum):
    BOX = "box"
    PLANE = "plane"
    CYLINDER = "cylinder"


@dataclass(frozen=True, eq=False)
class ClutterItem:
    kind: Primitive
    pose: RigidTransform
    dims: tuple

    def mesh(self) -> TriangleMesh:
        if self.kind is Primitive.BOX:
            return box_mesh(self.dims, self.pose)
        if self.kind is Primitive.PLANE:
            return plane_mesh(self.dims, self.pose)
        return cylinder_mesh(self.dims[0], self.dims[1], self.pose)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    robot_pose: RigidTransform
    clutter: tuple = ()
    noise_sigma: float = 0.005
    samples_total: int = SMALL_SAMPLES
    rng_seed: int = 0
    robot_mesh: TriangleMesh | None = None  # None -> bundled robot

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.samples_total < 1:
            raise ValueError("samples_total must be >= 1")
        object.__setattr__(self, "clutter", tuple(self.clutter))

    def robot(self) -> TriangleMesh:
        return self.robot_mesh if self.robot_mesh is not None else robot_mesh()

    def replace(self, **kw) -> "SceneSpec":
        args = dict(
            robot_pose=self.robot_pose,
            clutter=self.clutter,
            noise_sigma=self.noise_sigma,
            samples_total=self.samples_total,
            rng_seed=self.rng_seed,
            robot_mesh=self.robot_mesh,
        )
        args.update(kw)
        return SceneSpec(**args)


def scene_meshes(spec: SceneSpec) -> list[TriangleMesh]:
    """Posed robot first, then clutter in declaration order."""
    return [spec.robot().transformed(spec.robot_pose)] + [c.mesh() for c in spec.clutter]


def synthesize_scene(spec: SceneSpec) -> tuple[PointCloud, RigidTransform]:
    merged = TriangleMesh.merge(scene_meshes(spec))
    clean = sample_mesh(merged, SamplingConfig(spec.samples_total, spec.rng_seed))
    pts = clean.points
    if spec.noise_sigma > 0:
        # independent stream so noise does not shift the surface samples
        rng = np.random.default_rng([spec.rng_seed, 1])
        pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    return PointCloud(pts), spec.robot_pose


# -- seed perturbations ----------------------------------------------------


@dataclass(frozen=True)
class PerturbationGrid:
    rotation_step: float = np.pi / 10
    translation_extent: float = 1.0
    translation_step: float = 0.1

    def __post_init__(self):
        if not (self.rotation_step > 0 and self.translation_step > 0):
            raise ValueError("steps must be positive")
        if self.translation_extent < self.translation_step:
            raise ValueError("translation_extent must be >= translation_step")


@dataclass(frozen=True, eq=False)
class SeedSweep:
    rotation: list  # SeedPose per yaw offset
    rotation_offsets: np.ndarray  # radians
    translation: list  # SeedPose per grid offset
    translation_offsets: np.ndarray  # (n, 3) meters

    def as_dict(self) -> dict:
        return {"rotation": self.rotation, "translation": self.translation}


def truth_seed(truth: RigidTransform) -> SeedPose:
    return SeedPose(tuple(truth.translation), truth.yaw())


def perturb_seed(truth: RigidTransform, grid: PerturbationGrid = PerturbationGrid()) -> SeedSweep:
    base = truth_seed(truth)
    n_rot = int(round(2 * np.pi / grid.rotation_step))
    rot_off = np.arange(n_rot) * grid.rotation_step
    rotation = [SeedPose(base.position, base.yaw + a) for a in rot_off]
    half = int(round(0.5 * grid.translation_extent / grid.translation_step))
    ticks = np.arange(-half, half + 1) * grid.translation_step
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    offs = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    p0 = np.asarray(base.position)
    translation = [SeedPose(tuple(p0 + o), base.yaw) for o in offs]
    return SeedSweep(rotation, rot_off, translation, offs)


def simulate_user_guess(truth: RigidTransform, sigma_pos: float, sigma_yaw: float, rng_seed: int) -> SeedPose:
    if sigma_pos < 0 or sigma_yaw < 0:
        raise ValueError("sigmas must be >= 0")
    rng = np.random.default_rng(rng_seed)
    dp = rng.normal(0.0, 1.0, 3) * sigma_pos
    dyaw = rng.normal(0.0, 1.0) * sigma_yaw
    base = truth_seed(truth)
    return SeedPose(tuple(np.asarray(base.position) + dp), base.yaw + dyaw)


# -- scene presets ---------------------------------------------------------


def table_items(center_xy, yaw: float, size=(0.9, 0.6), height: float = 0.76, top: float = 0.04) -> list[ClutterItem]:
    """A table as five boxes: top plus four legs."""
    cx, cy = center_xy
    R = rot_z(yaw)
    items = [ClutterItem(Primitive.BOX, RigidTransform(R, (cx, cy, height - top / 2)), (size[0], size[1], top))]
    leg_h = height - top
    for sx in (-1, 1):
        for sy in (-1, 1):
            off = R @ np.array([sx * (size[0] / 2 - 0.04), sy * (size[1] / 2 - 0.04), 0.0])
            items.append(ClutterItem(Primitive.BOX, RigidTransform(R, (cx + off[0], cy + off[1], leg_h / 2)), (0.04, 0.04, leg_h)))
    return items


def floor_item(center_xy, size=(1.6, 1.6)) -> ClutterItem:
    return ClutterItem(Primitive.PLANE, RigidTransform(np.eye(3), (center_xy[0], center_xy[1], 0.0)), tuple(size))


def desk_scene(seed: int, noise_sigma: float = 0.005, samples_total: int = SMALL_SAMPLES) -> SceneSpec:
    """Robot on a floor patch with a table nearby (not touching)."""
    rng = np.random.default_rng([seed, 101])
    pos = np.append(rng.uniform(-0.3, 0.3, 2), 0.0)
    yaw = rng.uniform(-np.pi, np.pi)
    ang = rng.uniform(-np.pi, np.pi)
    dist = rng.uniform(0.95, 1.1)
    table_xy = pos[:2] + dist * np.array([np.cos(ang), np.sin(ang)])
    clutter = [floor_item(pos[:2])] + table_items(table_xy, rng.uniform(-np.pi, np.pi))
    return SceneSpec(RigidTransform(rot_z(yaw), pos), clutter, noise_sigma, samples_total, seed)


def isolated_scene(seed: int, noise_sigma: float = 0.005, samples_total: int = SMALL_SAMPLES) -> SceneSpec:
    """Robot on a floor patch with a far-away box: segmentable."""
    rng = np.random.default_rng([seed, 202])
    pos = np.append(rng.uniform(-0.3, 0.3, 2), 0.0)
    yaw = rng.uniform(-np.pi, np.pi)
    ang = rng.uniform(-np.pi, np.pi)
    bxy = pos[:2] + 1.3 * np.array([np.cos(ang), np.sin(ang)])
    clutter = [
        floor_item(pos[:2], (2.0, 2.0)),
        ClutterItem(Primitive.BOX, RigidTransform(rot_z(rng.uniform(0, np.pi)), (bxy[0], bxy[1], 0.2)), (0.4, 0.4, 0.4)),
    ]
    return SceneSpec(RigidTransform(rot_z(yaw), pos), clutter, noise_sigma, samples_total, seed)


def merged_table_scene(seed: int, noise_sigma: float = 0.005, samples_total: int = SMALL_SAMPLES) -> SceneSpec:
    """Robot standing flush against a table, so no distance gap separates them."""
    rng = np.random.default_rng([seed, 303])
    pos = np.append(rng.uniform(-0.2, 0.2, 2), 0.0)
    yaw = rng.uniform(-np.pi, np.pi)
    ang = yaw + np.pi / 2  # beside the arm, under nothing
    size = (1.2, 0.8)
    # table edge touches the base cylinder (radius 0.16)
    dist = 0.16 + size[1] / 2
    txy = pos[:2] + dist * np.array([np.cos(ang), np.sin(ang)])
    clutter = [floor_item(pos[:2], (2.0, 2.0))] + table_items(txy, ang - np.pi / 2, size)
    return SceneSpec(RigidTransform(rot_z(yaw), pos), clutter, noise_sigma, samples_total, seed)


def clutter_scene(seed: int, noise_sigma: float = 0.005, samples_total: int = 40_000, with_robot: bool = True) -> SceneSpec:
    """A 3 m room patch with the robot among a table, crates and a drum."""
    rng = np.random.default_rng([seed, 404])
    placed: list[tuple[np.ndarray, float]] = []

    def place(radius: float) -> np.ndarray:
        for _ in range(1000):
            xy = rng.uniform(-1.5 + radius, 1.5 - radius, 2)
            if all(np.linalg.norm(xy - p) > radius + r + 0.1 for p, r in placed):
                placed.append((xy, radius))
                return xy
        raise RuntimeError("could not place clutter")

    robot_xy = place(0.6)
    yaw = rng.uniform(-np.pi, np.pi)
    clutter = [floor_item((0.0, 0.0), (3.0, 3.0))]
    clutter += table_items(place(0.55), rng.uniform(-np.pi, np.pi))
    for _ in range(2):
        dims = tuple(rng.uniform(0.25, 0.55, 3))
        xy = place(0.5 * np.hypot(dims[0], dims[1]))
        clutter.append(ClutterItem(Primitive.BOX, RigidTransform(rot_z(rng.uniform(0, np.pi)), (xy[0], xy[1], dims[2] / 2)), dims))
    r, h = rng.uniform(0.15, 0.25), rng.uniform(0.5, 0.9)
    xy = place(r)
    clutter.append(ClutterItem(Primitive.CYLINDER, RigidTransform(np.eye(3), (xy[0], xy[1], h / 2)), (r, h)))
    pose = RigidTransform(rot_z(yaw), (robot_xy[0], robot_xy[1], 0.0))
    mesh = None if with_robot else TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), np.int64))
    return SceneSpec(pose, clutter, noise_sigma, samples_total, seed, mesh)


# -- config files ----------------------------------------------------------


def _pose_from_cfg(d: dict) -> RigidTransform:
    if "matrix" in d:
        return RigidTransform.from_matrix(np.asarray(d["matrix"], dtype=np.float64))
    pos = d.get("position", (0.0, 0.0, 0.0))
    return RigidTransform(rot_z(np.radians(float(d.get("yaw_deg", 0.0)))), pos)


def _pose_to_cfg(t: RigidTransform) -> dict:
    R = t.rotation
    if np.allclose(R, rot_z(t.yaw()), atol=1e-12, rtol=0):
        return {"position": [float(v) for v in t.translation], "yaw_deg": float(np.degrees(t.yaw()))}
    return {"matrix": t.matrix().tolist()}


def scene_from_dict(d: dict, base_dir: Path | None = None) -> SceneSpec:
    robot = d.get("robot", "builtin")
    mesh = None
    if robot != "builtin":
        p = Path(robot)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        mesh = load_mesh(p)
    clutter = []
    for item in d.get("clutter", []) or []:
        kind = Primitive(item["type"])
        clutter.append(ClutterItem(kind, _pose_from_cfg(item), tuple(float(v) for v in item["dims"])))
    return SceneSpec(
        robot_pose=_pose_from_cfg(d.get("robot_pose", {})),
        clutter=clutter,
        noise_sigma=float(d.get("noise_sigma", 0.005)),
        samples_total=int(d.get("samples_total", SMALL_SAMPLES)),
        rng_seed=int(d.get("rng_seed", 0)),
        robot_mesh=mesh,
    )


def scene_to_dict(spec: SceneSpec) -> dict:
    if spec.robot_mesh is not None:
        raise ValueError("scenes with a custom robot mesh must reference it by path")
    clutter = []
    for c in spec.clutter:
        entry = {"type": c.kind.value}
        entry.update(_pose_to_cfg(c.pose))
        entry["dims"] = [float(v) for v in c.dims]
        clutter.append(entry)
    return {
        "robot": "builtin",
        "robot_pose": _pose_to_cfg(spec.robot_pose),
        "clutter": clutter,
        "noise_sigma": float(spec.noise_sigma),
        "samples_total": int(spec.samples_total),
        "rng_seed": int(spec.rng_seed),
    }


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    return scene_from_dict(yaml.safe_load(path.read_text()) or {}, path.parent)


def save_scene_spec(spec: SceneSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(scene_to_dict(spec), sort_keys=False))
