"""Scene conditioning: cropping, downsampling, normals, MLS, planes, clusters."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import _backend
from ._backend import njit
from .errors import RadiusTooSmall, TooFewPoints
from .geom import PointCloud
from .kdtree import KdTree, _radius_gather


@dataclass(frozen=True)
class CropConfig:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 2.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("crop radius must be positive")


class Upsampling(enum.Enum):
    NONE = "none"
    VOXEL_GRID_DILATION = "voxel_grid"


@dataclass(frozen=True)
class MlsConfig:
    search_radius: float = 0.05
    polynomial_order: int = 2
    upsampling: Upsampling = Upsampling.NONE
    upsample_param: float = 0.05

    def __post_init__(self):
        if not self.search_radius > 0:
            raise ValueError("search_radius must be positive")
        if self.polynomial_order < 1:
            raise ValueError("polynomial_order must be >= 1")
        if self.upsampling is not Upsampling.NONE and not self.upsample_param > 0:
            raise ValueError("upsample_param must be positive")


@dataclass(frozen=True)
class PlaneRemovalConfig:
    distance_threshold: float = 0.01
    max_iterations: int = 500
    min_inlier_fraction: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be positive")
        if not 0 < self.min_inlier_fraction < 1:
            raise ValueError("min_inlier_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ClusterConfig:
    tolerance: float = 0.05
    min_cluster_size: int = 50
    max_cluster_size: int = 10_000_000

    def __post_init__(self):
        if not 0 < self.min_cluster_size <= self.max_cluster_size:
            raise ValueError("need 0 < min_cluster_size <= max_cluster_size")


# -- simple filters --------------------------------------------------------


def sphere_crop(cloud: PointCloud, cfg: CropConfig) -> PointCloud:
    """Keep points with ``|p - center| <= radius``, in input order."""
    c = np.asarray(cfg.center, dtype=np.float64)
    d = np.linalg.norm(cloud.points - c, axis=1)
    return cloud.subset(np.flatnonzero(d <= cfg.radius))


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output is ordered by voxel key. Normals, when present, are averaged and
    renormalized (a voxel whose normals cancel keeps its first normal).
    """
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    np.add.at(sums, inv, cloud.points)
    pts = sums / counts[:, None]
    nrm = None
    if cloud.normals is not None:
        nsum = np.zeros((m, 3))
        np.add.at(nsum, inv, cloud.normals)
        length = np.linalg.norm(nsum, axis=1)
        first = np.zeros(m, np.int64)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        bad = length < 1e-12
        nsum[bad] = cloud.normals[first[bad]]
        length[bad] = 1.0
        nrm = nsum / length[:, None]
    return PointCloud(pts, nrm)


def voxel_representatives(points: np.ndarray, voxel: float) -> np.ndarray:
    """Index of the input point closest to each occupied voxel's centroid."""
    keys = voxel_keys(points, voxel)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    cent = sums / counts[:, None]
    d = np.linalg.norm(points - cent[inv], axis=1)
    order = np.lexsort((np.arange(len(points)), d, inv))
    first = np.ones(len(order), bool)
    first[1:] = inv[order[1:]] != inv[order[:-1]]
    return np.sort(order[first])


# -- normals ---------------------------------------------------------------


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals from the k nearest neighbours (the point included).

    Each normal is flipped to face ``viewpoint``; when it is exactly
    perpendicular to the view ray the largest component is made positive.
    """
    n = len(cloud)
    if k < 3 or n <= k:
        raise TooFewPoints(f"normal estimation needs more than k={k} points (have {n})")
    tree = KdTree(cloud.points)
    idx, _ = tree.query_knn(cloud.points, k)
    nb = cloud.points[idx]  # (n, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    view = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    s = np.einsum("ij,ij->i", normals, view)
    amax = np.argmax(np.abs(normals), axis=1)
    tie_sign = normals[np.arange(n), amax]
    flip = (s < 0) | ((s == 0) & (tie_sign < 0))
    normals[flip] *= -1.0
    return PointCloud(cloud.points, normals)


# -- moving least squares --------------------------------------------------

FIT_WIDTH = 12 + 10  # origin, u, v, n, up to 10 polynomial coefficients (order <= 3)


def _n_coeff(order: int) -> int:
    return (order + 1) * (order + 2) // 2


RANK_TOL = 1e-10  # relative eigenvalue floor of the normal matrix
MLS_CHUNK = 16384  # queries per radius search in the numpy path; bounds memory


@njit
def _quadratic_normal_eq(D, w, m, ux, uy, uz, vx, vy, vz, nx, ny, nz, inv_r, M, rhs):
    # basis (1, u, v, u^2, uv, v^2): the normal matrix only needs moments up to degree 4
    m00 = m10 = m01 = m20 = m11 = m02 = 0.0
    m30 = m21 = m12 = m03 = m40 = m31 = m22 = m13 = m04 = 0.0
    h00 = h10 = h01 = h20 = h11 = h02 = 0.0
    for j in range(m):
        d0 = D[j, 0]
        d1 = D[j, 1]
        d2 = D[j, 2]
        u = (d0 * ux + d1 * uy + d2 * uz) * inv_r
        v = (d0 * vx + d1 * vy + d2 * vz) * inv_r
        h = (d0 * nx + d1 * ny + d2 * nz) * w[j]
        wj = w[j]
        wu = wj * u
        wv = wj * v
        wuu = wu * u
        wuv = wu * v
        wvv = wv * v
        m00 += wj
        m10 += wu
        m01 += wv
        m20 += wuu
        m11 += wuv
        m02 += wvv
        m30 += wuu * u
        m21 += wuu * v
        m12 += wuv * v
        m03 += wvv * v
        m40 += wuu * u * u
        m31 += wuu * u * v
        m22 += wuu * v * v
        m13 += wuv * v * v
        m04 += wvv * v * v
        h00 += h
        h10 += h * u
        h01 += h * v
        h20 += h * u * u
        h11 += h * u * v
        h02 += h * v * v
    mom = np.array(
        [[m00, m01, m02, m03, m04], [m10, m11, m12, m13, 0.0], [m20, m21, m22, 0.0, 0.0], [m30, m31, 0.0, 0.0, 0.0], [m40, 0.0, 0.0, 0.0, 0.0]]
    )
    ep = (0, 1, 0, 2, 1, 0)
    eq = (0, 0, 1, 0, 1, 2)
    for a in range(6):
        for b in range(6):
            M[a, b] = mom[ep[a] + ep[b], eq[a] + eq[b]]
    rhs[0] = h00
    rhs[1] = h10
    rhs[2] = h01
    rhs[3] = h20
    rhs[4] = h11
    rhs[5] = h02


@njit
def _mls_fit_kernel(pts, perm, lo, hi, left, right, bmin, bmax, r, order, out, valid, counts):
    # tree walk fused with the fit: neighbours land in a contiguous local buffer
    r2 = r * r
    cap = 512
    idx = np.empty(cap, np.int64)
    D = np.empty((cap, 3))
    w = np.empty(cap)
    stack = np.empty(256, np.int64)
    M = np.empty((10, 10))
    tri = np.empty(55)  # packed upper triangle of the normal matrix
    rhs = np.empty(10)
    row = np.empty(10)
    upow = np.empty(4)
    vpow = np.empty(4)
    cov = np.empty((3, 3))
    for i in range(pts.shape[0]):
        px = pts[i, 0]
        py = pts[i, 1]
        pz = pts[i, 2]
        m = _radius_gather(pts, perm, lo, hi, left, right, bmin, bmax, px, py, pz, r2, idx, stack)
        if m > cap:
            cap = 2 * m
            idx = np.empty(cap, np.int64)
            D = np.empty((cap, 3))
            w = np.empty(cap)
            _radius_gather(pts, perm, lo, hi, left, right, bmin, bmax, px, py, pz, r2, idx, stack)
        counts[i] = m - 1
        if m < 4:  # self plus fewer than three neighbours
            valid[i] = False
            continue
        valid[i] = True
        wsum = 0.0
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for j in range(m):
            p = idx[j]
            dx = pts[p, 0] - px
            dy = pts[p, 1] - py
            dz = pts[p, 2] - pz
            D[j, 0] = dx
            D[j, 1] = dy
            D[j, 2] = dz
            wj = np.exp(-(dx * dx + dy * dy + dz * dz) / r2)
            w[j] = wj
            wsum += wj
            cx += wj * dx
            cy += wj * dy
            cz += wj * dz
        cx /= wsum
        cy /= wsum
        cz /= wsum
        cov[:, :] = 0.0
        for j in range(m):
            d0 = D[j, 0] - cx
            d1 = D[j, 1] - cy
            d2 = D[j, 2] - cz
            D[j, 0] = d0
            D[j, 1] = d1
            D[j, 2] = d2
            cov[0, 0] += w[j] * d0 * d0
            cov[0, 1] += w[j] * d0 * d1
            cov[0, 2] += w[j] * d0 * d2
            cov[1, 1] += w[j] * d1 * d1
            cov[1, 2] += w[j] * d1 * d2
            cov[2, 2] += w[j] * d2 * d2
        cov[1, 0] = cov[0, 1]
        cov[2, 0] = cov[0, 2]
        cov[2, 1] = cov[1, 2]
        _, vecs = np.linalg.eigh(cov)
        nx, ny, nz = vecs[0, 0], vecs[1, 0], vecs[2, 0]
        ux, uy, uz = vecs[0, 2], vecs[1, 2], vecs[2, 2]
        vx = ny * uz - nz * uy
        vy = nz * ux - nx * uz
        vz = nx * uy - ny * ux
        out[i, 0] = px + cx
        out[i, 1] = py + cy
        out[i, 2] = pz + cz
        out[i, 3] = ux
        out[i, 4] = uy
        out[i, 5] = uz
        out[i, 6] = vx
        out[i, 7] = vy
        out[i, 8] = vz
        out[i, 9] = nx
        out[i, 10] = ny
        out[i, 11] = nz
        for c in range(12, out.shape[1]):
            out[i, c] = 0.0
        o = order
        while o >= 2 and m < (o + 1) * (o + 2) // 2:
            o -= 1
        if o < 2:
            continue
        nc = (o + 1) * (o + 2) // 2
        if o == 2:
            _quadratic_normal_eq(D, w, m, ux, uy, uz, vx, vy, vz, nx, ny, nz, 1.0 / r, M, rhs)
        else:
            tri[:] = 0.0
            rhs[:nc] = 0.0
            for j in range(m):
                d0 = D[j, 0]
                d1 = D[j, 1]
                d2 = D[j, 2]
                u = (d0 * ux + d1 * uy + d2 * uz) / r
                v = (d0 * vx + d1 * vy + d2 * vz) / r
                h = d0 * nx + d1 * ny + d2 * nz
                upow[0] = 1.0
                vpow[0] = 1.0
                for a in range(1, o + 1):
                    upow[a] = upow[a - 1] * u
                    vpow[a] = vpow[a - 1] * v
                col = 0
                for deg in range(o + 1):
                    for a in range(deg, -1, -1):
                        row[col] = upow[a] * vpow[deg - a]
                        col += 1
                t = 0
                for a in range(nc):
                    wa = w[j] * row[a]
                    rhs[a] += wa * h
                    for b in range(a, nc):
                        tri[t] += wa * row[b]
                        t += 1
            t = 0
            for a in range(nc):
                for b in range(a, nc):
                    M[a, b] = tri[t]
                    M[b, a] = tri[t]
                    t += 1
        lam, V = np.linalg.eigh(M[:nc, :nc].copy())
        if lam[0] <= RANK_TOL * lam[nc - 1]:
            continue
        proj = V.T @ rhs[:nc]
        coef = V @ (proj / lam)
        col = 0
        for deg in range(o + 1):
            sc = r**deg
            for a in range(deg + 1):
                out[i, 12 + col] = coef[col] / sc
                col += 1


def _mls_fit_numpy(pts, start, offsets, nbrs, r, order, out, valid):
    r2 = r * r
    for li in range(len(offsets) - 1):
        i = start + li
        nb = nbrs[offsets[li] : offsets[li + 1]]
        m = len(nb)
        if m < 4:
            valid[i] = False
            continue
        valid[i] = True
        q = pts[nb]
        d = q - pts[i]
        w = np.exp(-(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]) / r2)
        c = (w[:, None] * q).sum(axis=0) / w.sum()
        dc = q - c
        cov = (w[:, None, None] * dc[:, :, None] * dc[:, None, :]).sum(axis=0)
        _, vecs = np.linalg.eigh(cov)
        nvec = vecs[:, 0]
        uvec = vecs[:, 2]
        vvec = np.cross(nvec, uvec)
        out[i, :12] = np.concatenate([c, uvec, vvec, nvec])
        out[i, 12:] = 0.0
        o = order
        while o >= 2 and m < _n_coeff(o):
            o -= 1
        if o < 2:
            continue
        u = (dc @ uvec) / r
        v = (dc @ vvec) / r
        A = np.stack([u**a * v ** (deg - a) for deg in range(o + 1) for a in range(deg, -1, -1)], axis=1)
        M = (A * w[:, None]).T @ A
        lam, V = np.linalg.eigh(M)
        if lam[0] <= RANK_TOL * lam[-1]:
            continue
        coef = V @ ((V.T @ (A.T @ (w * (dc @ nvec)))) / lam)
        scale = np.concatenate([np.full(deg + 1, r**deg) for deg in range(o + 1)])
        out[i, 12 : 12 + len(coef)] = coef / scale


def _project(fits: np.ndarray, which: np.ndarray, x: np.ndarray, order: int) -> np.ndarray:
    """Project points ``x`` onto the local surfaces ``fits[which]``."""
    f = fits[which]
    c, U, V, N = f[:, 0:3], f[:, 3:6], f[:, 6:9], f[:, 9:12]
    d = x - c
    u = np.einsum("ij,ij->i", d, U)
    v = np.einsum("ij,ij->i", d, V)
    h = np.zeros(len(x))
    col = 12
    for deg in range(order + 1):
        for a in range(deg, -1, -1):
            h += f[:, col] * u**a * v ** (deg - a)
            col += 1
    return c + u[:, None] * U + v[:, None] * V + h[:, None] * N


def mls_fit(points: np.ndarray, cfg: MlsConfig, tree: KdTree | None = None):
    """Local polynomial fits at every point; returns ``(fits, valid, n_neighbours)``.

    ``tree`` must be built over ``points`` itself.
    """
    if cfg.polynomial_order > 3:
        raise ValueError("polynomial_order above 3 is not supported")
    tree = KdTree(points) if tree is None else tree
    if len(tree) != len(points):
        raise ValueError("tree must index the fitted points")
    n = len(points)
    fits = np.zeros((n, FIT_WIDTH))
    valid = np.zeros(n, bool)
    counts = np.empty(n, np.int64)
    r = float(cfg.search_radius)
    if _backend.use_numba():
        if n:
            _mls_fit_kernel(tree.points, *tree._arrays, r, cfg.polynomial_order, fits, valid, counts)
        return fits, valid, counts
    for s in range(0, n, MLS_CHUNK):
        e = min(n, s + MLS_CHUNK)
        offsets, nbrs = tree.query_radius(points[s:e], r)
        _mls_fit_numpy(points, s, offsets, nbrs, r, cfg.polynomial_order, fits, valid)
        counts[s:e] = np.diff(offsets) - 1
    return fits, valid, counts


def mls_smooth(cloud: PointCloud, cfg: MlsConfig) -> PointCloud:
    """Moving-least-squares smoothing with optional voxel-grid dilation upsampling.

    Every point with at least three neighbours inside ``search_radius`` is
    projected onto the weighted polynomial surface fitted around it; the
    rest are dropped. With ``VOXEL_GRID_DILATION`` the occupied voxels of
    size ``upsample_param`` are dilated by one cell and each voxel centre is
    projected onto the surface of its nearest input point; those points are
    appended after the smoothed input.

    Raises
    ------
    RadiusTooSmall
        If more than 10% of the points have fewer than three neighbours.
    """
    if len(cloud) == 0:
        raise TooFewPoints("MLS needs a non-empty cloud")
    pts = cloud.points
    tree = KdTree(pts)
    fits, valid, nn = mls_fit(pts, cfg, tree)
    sparse = np.count_nonzero(nn < 3)
    if sparse > 0.1 * len(pts):
        raise RadiusTooSmall(
            f"{sparse} of {len(pts)} points have fewer than 3 neighbours within {cfg.search_radius} m"
        )
    keep = np.flatnonzero(valid)
    out = [_project(fits, keep, pts[keep], cfg.polynomial_order)]
    if cfg.upsampling is Upsampling.VOXEL_GRID_DILATION:
        vs = cfg.upsample_param
        keys = np.unique(voxel_keys(pts, vs), axis=0)
        shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
        dil = np.unique((keys[:, None, :] + shifts[None, :, :]).reshape(-1, 3), axis=0)
        seeds = (dil + 0.5) * vs
        near, _ = KdTree(pts[keep]).query(seeds)
        out.append(_project(fits, keep[near], seeds, cfg.polynomial_order))
    return PointCloud(np.concatenate(out))


# -- RANSAC plane removal --------------------------------------------------


@njit
def _plane_counts_kernel(pts, planes, thr, counts):
    for k in range(planes.shape[0]):
        a = planes[k, 0]
        b = planes[k, 1]
        c = planes[k, 2]
        d = planes[k, 3]
        cnt = 0
        for i in range(pts.shape[0]):
            if abs(a * pts[i, 0] + b * pts[i, 1] + c * pts[i, 2] + d) <= thr:
                cnt += 1
        counts[k] = cnt


def _plane_counts_numpy(pts, planes, thr, counts):
    step = max(1, 4_000_000 // max(len(pts), 1))
    for s in range(0, len(planes), step):
        pl = planes[s : s + step]
        # same operation order as the kernel: ((a x + b y) + c z) + d
        r = (
            pl[None, :, 0] * pts[:, 0:1] + pl[None, :, 1] * pts[:, 1:2] + pl[None, :, 2] * pts[:, 2:3]
        ) + pl[None, :, 3]
        counts[s : s + step] = np.count_nonzero(np.abs(r) <= thr, axis=0)


def plane_inlier_counts(points: np.ndarray, planes: np.ndarray, thr: float) -> np.ndarray:
    counts = np.zeros(len(planes), np.int64)
    if len(planes) and len(points):
        kern = _plane_counts_kernel if _backend.use_numba() else _plane_counts_numpy
        kern(np.ascontiguousarray(points), np.ascontiguousarray(planes), float(thr), counts)
    return counts


def _candidate_planes(pts: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    m = len(pts)
    tri = np.empty((n, 3), np.int64)
    for j in range(n):
        tri[j] = rng.choice(m, 3, replace=False)
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    nrm = np.cross(b - a, c - a)
    ln = np.linalg.norm(nrm, axis=1)
    ok = ln > 1e-12
    nrm = nrm[ok] / ln[ok, None]
    d = -np.einsum("ij,ij->i", nrm, a[ok])
    return np.column_stack([nrm, d])


def remove_planes(cloud: PointCloud, cfg: PlaneRemovalConfig) -> tuple[PointCloud, list[np.ndarray]]:
    """Strip dominant planes one at a time.

    Returns the remaining points (input order preserved) and the list of
    removed plane coefficients ``(a, b, c, d)`` with unit ``(a, b, c)``.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    remaining = np.arange(len(cloud))
    planes: list[np.ndarray] = []
    pts_all = cloud.points
    while len(remaining) >= 3:
        pts = pts_all[remaining]
        cand = _candidate_planes(pts, rng, cfg.max_iterations)
        if len(cand) == 0:
            break
        counts = plane_inlier_counts(pts, cand, cfg.distance_threshold)
        best = int(np.argmax(counts))
        if counts[best] < cfg.min_inlier_fraction * len(pts):
            break
        plane = cand[best]
        inl = np.abs(pts @ plane[:3] + plane[3]) <= cfg.distance_threshold
        # least-squares refit on the consensus set, then re-select inliers
        q = pts[inl]
        cq = q.mean(axis=0)
        _, _, vt = np.linalg.svd(q - cq, full_matrices=False)
        n = vt[2]
        refined = np.append(n, -n @ cq)
        inl2 = np.abs(pts @ refined[:3] + refined[3]) <= cfg.distance_threshold
        if np.count_nonzero(inl2) >= np.count_nonzero(inl):
            plane, inl = refined, inl2
        planes.append(plane)
        remaining = remaining[~inl]
    return cloud.subset(remaining), planes


# -- Euclidean clustering --------------------------------------------------


def euclidean_cluster(cloud: PointCloud, cfg: ClusterConfig) -> list[PointCloud]:
    """Connected components of the ``distance <= tolerance`` graph."""
    return [cloud.subset(ix) for ix in euclidean_cluster_indices(cloud, cfg)]


def euclidean_cluster_indices(cloud: PointCloud, cfg: ClusterConfig) -> list[np.ndarray]:
    n = len(cloud)
    if n == 0:
        return []
    tree = KdTree(cloud.points)
    offsets, nbrs = tree.query_radius(cloud.points, cfg.tolerance)
    rows = np.repeat(np.arange(n), np.diff(offsets))
    graph = csr_matrix((np.ones(len(nbrs), np.int8), (rows, nbrs)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels, minlength=ncomp)
    first = np.full(ncomp, n, np.int64)
    np.minimum.at(first, labels, np.arange(n))
    ok = (sizes >= cfg.min_cluster_size) & (sizes <= cfg.max_cluster_size)
    comps = np.flatnonzero(ok)
    comps = comps[np.lexsort((first[comps], -sizes[comps]))]
    order = np.argsort(labels, kind="stable")
    starts = np.zeros(ncomp + 1, np.int64)
    np.cumsum(sizes, out=starts[1:])
    return [order[starts[c] : starts[c + 1]] for c in comps]
