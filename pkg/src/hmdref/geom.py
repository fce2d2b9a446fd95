"""Core geometry types: point clouds, rigid transforms, boxes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyCloud

ORTHO_TOL = 1e-9
NORMAL_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points (meters) with optional unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, copy=True).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > NORMAL_TOL:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals)

    def bounds(self) -> "Aabb":
        if len(self) == 0:
            raise EmptyCloud("cannot bound an empty cloud")
        return Aabb(self.points.min(axis=0), self.points.max(axis=0))

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("empty cloud has no centroid")
        return self.points.mean(axis=0)

    def equals(self, other: "PointCloud") -> bool:
        """Bitwise equality of points and normals."""
        if not np.array_equal(self.points, other.points):
            return False
        if (self.normals is None) != (other.normals is None):
            return False
        return self.normals is None or np.array_equal(self.normals, other.normals)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.empty((0, 3))
        if clouds and all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    a = float(np.fmod(a, 2 * np.pi))
    if a <= -np.pi:
        a += 2 * np.pi
    elif a > np.pi:
        a -= 2 * np.pi
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, position=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw), position)

    @classmethod
    def translation_only(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(x) == a(b(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def yaw(self) -> float:
        """Heading of the rotated x axis about world z."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def equals(self, other: "RigidTransform") -> bool:
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self) -> str:
        return f"RigidTransform(yaw={np.degrees(self.yaw()):.3f}deg, t={np.round(self.translation, 6).tolist()})"


compose = RigidTransform.__matmul__


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def apply_transform(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Move points by ``t``; normals are rotated only."""
    pts = t.apply(cloud.points)
    nrm = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(pts, nrm)


def pose_error(est: RigidTransform, truth: RigidTransform, pivot=(0.0, 0.0, 0.0)) -> tuple[float, float]:
    """(translation error in m at ``pivot``, rotation error in degrees)."""
    pivot = np.asarray(pivot, dtype=np.float64)
    dt = float(np.linalg.norm(est.apply(pivot) - truth.apply(pivot)))
    dr = np.degrees(rotation_angle(est.rotation @ truth.rotation.T))
    return dt, float(dr)


def best_rigid_fit(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (SVD/Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min, dtype=np.float64, copy=True).reshape(3)
        hi = np.array(self.max, dtype=np.float64, copy=True).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb requires min <= max componentwise")
        object.__setattr__(self, "min", _frozen(lo))
        object.__setattr__(self, "max", _frozen(hi))

    @property
    def sides(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.sides))

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points).reshape(-1, 3)
        return np.all((p >= self.min) & (p <= self.max), axis=1)
