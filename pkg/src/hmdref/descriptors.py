"""Point descriptors used to score detection boxes.

``LOCAL_HISTOGRAM`` is an FPFH-style 33-bin histogram built from three
pair features between a point and each radius neighbour. Normals coming
out of :func:`estimate_normals` have arbitrary sign on a closed object,
so every feature is folded to be sign-invariant: ``|v.n_t|``, ``|u.d|``
and ``|n_s.n_t|``, each in [0, 1] with 11 bins.

``GLOBAL_SIGNATURE`` describes a whole point set with one vector: a
histogram of normal-to-centroid-ray angles plus a distance-to-centroid
shape distribution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import njit
from .errors import TooFewPoints
from .geom import PointCloud
from .kdtree import KdTree

NBINS = 11
HIST_LEN = 3 * NBINS
GLOBAL_VIEW_BINS = 16
GLOBAL_SHAPE_BINS = 32


class Descriptor(enum.Enum):
    LOCAL_HISTOGRAM = "local"
    GLOBAL_SIGNATURE = "global"


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    keypoints: PointCloud
    descriptors: np.ndarray  # (n_keypoints, length), rows L1-normalized

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float64)
        if d.ndim != 2 or len(d) != len(self.keypoints):
            raise ValueError("need one descriptor row per keypoint")
        object.__setattr__(self, "descriptors", d)

    def __len__(self) -> int:
        return len(self.keypoints)


def _spfh_kernel(pts, nrm, offsets, nbrs, out):
    n = pts.shape[0]
    for i in range(n):
        cnt = 0
        for e in range(offsets[i], offsets[i + 1]):
            j = nbrs[e]
            if j == i:
                continue
            dx = pts[j, 0] - pts[i, 0]
            dy = pts[j, 1] - pts[i, 1]
            dz = pts[j, 2] - pts[i, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist == 0.0:
                continue
            dx /= dist
            dy /= dist
            dz /= dist
            ux, uy, uz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
            tx, ty, tz = nrm[j, 0], nrm[j, 1], nrm[j, 2]
            vx = uy * dz - uz * dy
            vy = uz * dx - ux * dz
            vz = ux * dy - uy * dx
            vlen = np.sqrt(vx * vx + vy * vy + vz * vz)
            f1 = 0.0
            if vlen > 1e-12:
                f1 = abs(vx * tx + vy * ty + vz * tz) / vlen
            f2 = abs(ux * dx + uy * dy + uz * dz)
            f3 = abs(ux * tx + uy * ty + uz * tz)
            b = int(f1 * NBINS)
            out[i, min(b, NBINS - 1)] += 1.0
            b = int(f2 * NBINS)
            out[i, NBINS + min(b, NBINS - 1)] += 1.0
            b = int(f3 * NBINS)
            out[i, 2 * NBINS + min(b, NBINS - 1)] += 1.0
            cnt += 1
        if cnt > 0:
            for b in range(3 * NBINS):
                out[i, b] /= cnt


def _spfh_numpy(pts, nrm, offsets, nbrs, out):
    n = pts.shape[0]
    rows = np.repeat(np.arange(n), np.diff(offsets))
    d = pts[nbrs] - pts[rows]
    dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    keep = (nbrs != rows) & (dist != 0.0)
    rows, cols, d, dist = rows[keep], nbrs[keep], d[keep], dist[keep]
    d = d / dist[:, None]
    u = nrm[rows]
    t = nrm[cols]
    v = np.stack(
        [u[:, 1] * d[:, 2] - u[:, 2] * d[:, 1], u[:, 2] * d[:, 0] - u[:, 0] * d[:, 2], u[:, 0] * d[:, 1] - u[:, 1] * d[:, 0]],
        axis=1,
    )
    vlen = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
    dot_vt = v[:, 0] * t[:, 0] + v[:, 1] * t[:, 1] + v[:, 2] * t[:, 2]
    f1 = np.zeros(len(rows))
    ok = vlen > 1e-12
    f1[ok] = np.abs(dot_vt[ok]) / vlen[ok]
    f2 = np.abs(u[:, 0] * d[:, 0] + u[:, 1] * d[:, 1] + u[:, 2] * d[:, 2])
    f3 = np.abs(u[:, 0] * t[:, 0] + u[:, 1] * t[:, 1] + u[:, 2] * t[:, 2])
    for k, f in enumerate((f1, f2, f3)):
        b = np.minimum((f * NBINS).astype(np.int64), NBINS - 1)
        np.add.at(out, (rows, k * NBINS + b), 1.0)
    cnt = np.bincount(rows, minlength=n).astype(np.float64)
    has = cnt > 0
    out[has] /= cnt[has, None]


def _fpfh_kernel(pts, spfh, keys, offsets, nbrs, out):
    for q in range(keys.shape[0]):
        i = keys[q]
        k = 0
        for e in range(offsets[q], offsets[q + 1]):
            if nbrs[e] != i:
                k += 1
        for b in range(HIST_LEN):
            out[q, b] = spfh[i, b]
        if k == 0:
            continue
        for e in range(offsets[q], offsets[q + 1]):
            j = nbrs[e]
            if j == i:
                continue
            dx = pts[j, 0] - pts[i, 0]
            dy = pts[j, 1] - pts[i, 1]
            dz = pts[j, 2] - pts[i, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist == 0.0:
                continue
            w = 1.0 / (dist * k)
            for b in range(HIST_LEN):
                out[q, b] += w * spfh[j, b]


def _fpfh_numpy(pts, spfh, keys, offsets, nbrs, out):
    nq = len(keys)
    rows = np.repeat(np.arange(nq), np.diff(offsets))
    src = keys[rows]
    notself = nbrs != src
    k = np.bincount(rows[notself], minlength=nq).astype(np.float64)
    d = pts[nbrs] - pts[src]
    dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    keep = notself & (dist != 0.0)
    rows, cols, dist = rows[keep], nbrs[keep], dist[keep]
    out[:] = spfh[keys]
    w = 1.0 / (dist * k[rows])
    np.add.at(out, rows, w[:, None] * spfh[cols])


_spfh_jit = njit(_spfh_kernel)
_fpfh_jit = njit(_fpfh_kernel)


def _normalize_blocks(h: np.ndarray) -> np.ndarray:
    """L1-normalise each of the three feature blocks, then the whole row."""
    h = h.copy()
    for k in range(3):
        blk = h[:, k * NBINS : (k + 1) * NBINS]
        s = blk.sum(axis=1, keepdims=True)
        np.divide(blk, s, out=blk, where=s > 0)
    s = h.sum(axis=1, keepdims=True)
    np.divide(h, s, out=h, where=s > 0)
    return h


def spfh(cloud: PointCloud, radius: float, tree: KdTree | None = None) -> np.ndarray:
    """Per-point simplified histograms (unnormalised blocks, counts averaged)."""
    if cloud.normals is None:
        raise ValueError("descriptors need normals")
    tree = tree if tree is not None else KdTree(cloud.points)
    offsets, nbrs = tree.query_radius(cloud.points, radius)
    out = np.zeros((len(cloud), HIST_LEN))
    if _backend.use_numba():
        _spfh_jit(cloud.points, cloud.normals, offsets, nbrs, out)
    else:
        _spfh_numpy(cloud.points, cloud.normals, offsets, nbrs, out)
    return out


def fpfh_at(cloud: PointCloud, keys: np.ndarray, radius: float, spfh_all: np.ndarray, tree: KdTree) -> np.ndarray:
    """FPFH rows for the points ``keys`` given precomputed SPFH of the cloud."""
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    offsets, nbrs = tree.query_radius(cloud.points[keys], radius)
    out = np.zeros((len(keys), HIST_LEN))
    if _backend.use_numba():
        _fpfh_jit(cloud.points, spfh_all, keys, offsets, nbrs, out)
    else:
        _fpfh_numpy(cloud.points, spfh_all, keys, offsets, nbrs, out)
    return _normalize_blocks(out)


def global_signature(cloud: PointCloud, scale: float) -> np.ndarray:
    """One L1-normalised vector for the whole set.

    First block: |cos| of the angle between each normal and the ray from
    the centroid. Second block: distance to the centroid over ``scale``
    (clipped to the last bin).
    """
    if cloud.normals is None:
        raise ValueError("descriptors need normals")
    c = cloud.centroid()
    ray = cloud.points - c
    r = np.linalg.norm(ray, axis=1)
    safe = np.where(r > 0, r, 1.0)
    cosv = np.abs(np.einsum("ij,ij->i", cloud.normals, ray)) / safe
    cosv[r == 0] = 1.0
    view = np.bincount(np.minimum((cosv * GLOBAL_VIEW_BINS).astype(np.int64), GLOBAL_VIEW_BINS - 1), minlength=GLOBAL_VIEW_BINS)
    sb = np.minimum((r / scale * GLOBAL_SHAPE_BINS).astype(np.int64), GLOBAL_SHAPE_BINS - 1)
    shape = np.bincount(sb, minlength=GLOBAL_SHAPE_BINS)
    h = np.concatenate([view / max(view.sum(), 1), shape / max(shape.sum(), 1)]).astype(np.float64)
    return (h / h.sum())[None, :]
