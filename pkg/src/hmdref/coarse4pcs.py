"""Global alignment with 4-point congruent sets, and the segment-first pipeline.

A wide, nearly coplanar 4-point base is drawn from the model. Its two
diagonals cut each other at fixed ratios ``r1``, ``r2``, which survive any
rigid motion. Every cluster point pair at the first diagonal's length
proposes an intersection point ``q_i + r1 (q_j - q_i)``, every pair at the
second length proposes ``q_k + r2 (q_l - q_k)``; proposals that coincide
give a congruent 4-point set and a rigid hypothesis. Hypotheses are ranked
by LCP: the fraction of sampled model points landing within ``delta`` of a
cluster point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import njit
from .errors import NoCongruentBase, SegmentationFailed, TooFewPoints
from .geom import Aabb, PointCloud, RigidTransform, best_rigid_fit, rot_z
from .icp import IcpConfig, RegistrationResult, register_icp
from .kdtree import KdTree
from .preprocess import ClusterConfig, PlaneRemovalConfig, euclidean_cluster, remove_planes

LCP_CLUSTER_MAX = 2000
LCP_PREFIX = 32
MAX_HYPOTHESES = 2000  # per base, lowest fit residual first
MERGED_VOLUME_FACTOR = 1.5
SIZE_GATE = (0.5, 2.0)


@dataclass(frozen=True)
class FourPcsConfig:
    overlap_estimate: float = 0.5
    delta: float = 0.01
    sample_size: int = 400
    max_bases: int = 200
    rng_seed: int = 0
    stop_score: float = 1.0
    lcp_sample: int = 300

    def __post_init__(self):
        if not 0 < self.overlap_estimate <= 1:
            raise ValueError("overlap_estimate must lie in (0, 1]")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.sample_size < 4 or self.max_bases < 1 or self.lcp_sample < 1:
            raise ValueError("sample_size >= 4, max_bases >= 1 and lcp_sample >= 1 required")


@dataclass(frozen=True, eq=False)
class CoarseResult:
    transform: RigidTransform
    lcp_score: float
    bases_tried: int


# -- pair search -----------------------------------------------------------


@njit
def _band_pairs_kernel(pts, lo2, hi2, fill, out):
    n = pts.shape[0]
    c = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = pts[j, 0] - pts[i, 0]
            dy = pts[j, 1] - pts[i, 1]
            dz = pts[j, 2] - pts[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if lo2 <= d2 <= hi2:
                if fill:
                    out[c, 0] = i
                    out[c, 1] = j
                c += 1
    return c


def _band_pairs_numpy(pts: np.ndarray, lo2: float, hi2: float) -> np.ndarray:
    n = len(pts)
    out = []
    step = max(1, 2_000_000 // max(n, 1))
    for a in range(0, n, step):
        blk = pts[a : a + step]
        d = pts[None, :, :] - blk[:, None, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        i, j = np.nonzero((d2 >= lo2) & (d2 <= hi2))
        i = i + a
        keep = j > i
        out.append(np.stack([i[keep], j[keep]], axis=1))
    return np.concatenate(out) if out else np.empty((0, 2), np.int64)


def band_pairs(pts: np.ndarray, dist: float, eps: float) -> np.ndarray:
    """Unordered pairs ``i < j`` with ``| |p_i - p_j| - dist | <= eps``, row-major order."""
    lo = max(dist - eps, 0.0)
    lo2, hi2 = lo * lo, (dist + eps) ** 2
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if not _backend.use_numba():
        return _band_pairs_numpy(pts, lo2, hi2).astype(np.int64)
    dummy = np.empty((0, 2), np.int64)
    n = _band_pairs_kernel(pts, lo2, hi2, False, dummy)
    out = np.empty((n, 2), np.int64)
    _band_pairs_kernel(pts, lo2, hi2, True, out)
    return out


# -- LCP -------------------------------------------------------------------


class _Grid:
    """Dense uniform grid (cell >= delta) for 'any point within delta' tests."""

    MAX_CELLS = 8_000_000

    def __init__(self, pts: np.ndarray, delta: float):
        self.delta = float(delta)
        lo = pts.min(axis=0) - delta
        span = pts.max(axis=0) + delta - lo
        cell = self.delta
        while np.prod(np.floor(span / cell) + 1) > self.MAX_CELLS:
            cell *= 1.5
        self.cell = cell
        self.origin = lo
        self.dims = (np.floor(span / cell) + 1).astype(np.int64)
        c = np.floor((pts - lo) / cell).astype(np.int64)
        flat = (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]
        order = np.argsort(flat, kind="stable")
        self.pts = np.ascontiguousarray(pts[order])
        ncell = int(np.prod(self.dims))
        self.start = np.searchsorted(flat[order], np.arange(ncell + 1)).astype(np.int64)


@njit
def _lcp_kernel(src, rots, trans, gpts, start, origin, dims, cell, delta, floor, order, out):
    d2max = delta * delta
    ns = src.shape[0]
    for oc in range(order.shape[0]):
        c = order[oc]
        hit = 0
        for s in range(ns):
            if hit + (ns - s) < floor:
                break  # cannot reach the best score seen so far
            x = rots[c, 0, 0] * src[s, 0] + rots[c, 0, 1] * src[s, 1] + rots[c, 0, 2] * src[s, 2] + trans[c, 0]
            y = rots[c, 1, 0] * src[s, 0] + rots[c, 1, 1] * src[s, 1] + rots[c, 1, 2] * src[s, 2] + trans[c, 1]
            z = rots[c, 2, 0] * src[s, 0] + rots[c, 2, 1] * src[s, 1] + rots[c, 2, 2] * src[s, 2] + trans[c, 2]
            fx = (x - origin[0]) / cell
            fy = (y - origin[1]) / cell
            fz = (z - origin[2]) / cell
            if fx < -1.0 or fy < -1.0 or fz < -1.0 or fx > dims[0] + 1.0 or fy > dims[1] + 1.0 or fz > dims[2] + 1.0:
                continue
            cx = int(np.floor(fx))
            cy = int(np.floor(fy))
            cz = int(np.floor(fz))
            found = False
            for ix in range(max(cx - 1, 0), min(cx + 2, dims[0])):
                for iy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                    for iz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                        key = (ix * dims[1] + iy) * dims[2] + iz
                        for k in range(start[key], start[key + 1]):
                            dx = gpts[k, 0] - x
                            dy = gpts[k, 1] - y
                            dz = gpts[k, 2] - z
                            if dx * dx + dy * dy + dz * dz <= d2max:
                                found = True
                                break
                        if found:
                            break
                    if found:
                        break
                if found:
                    break
            if found:
                hit += 1
        out[c] = hit / ns
        if hit > floor:
            floor = hit


_NEIGHBOUR_CELLS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
_LCP_CHUNK = 1 << 18  # moved points per vectorized block


def _lcp_numpy(src, rots, trans, grid: _Grid, out):
    ns = len(src)
    d2max = grid.delta * grid.delta
    dims = grid.dims
    step = max(1, _LCP_CHUNK // ns)
    for h0 in range(0, len(rots), step):
        R, t = rots[h0 : h0 + step], trans[h0 : h0 + step]
        # same association order as the kernel: ((r0 s0 + r1 s1) + r2 s2) + t
        moved = np.stack(
            [
                R[:, None, k, 0] * src[None, :, 0] + R[:, None, k, 1] * src[None, :, 1] + R[:, None, k, 2] * src[None, :, 2]
                + t[:, None, k]
                for k in range(3)
            ],
            axis=2,
        ).reshape(-1, 3)
        f = (moved - grid.origin) / grid.cell
        near = np.all((f >= -1.0) & (f <= dims + 1.0), axis=1)
        rows = np.flatnonzero(near)
        cells = np.floor(f[rows]).astype(np.int64)
        hit = np.zeros(len(moved), bool)
        for off in _NEIGHBOUR_CELLS:
            cc = cells + off
            inb = np.all((cc >= 0) & (cc < dims), axis=1) & ~hit[rows]
            r = rows[inb]
            key = (cc[inb, 0] * dims[1] + cc[inb, 1]) * dims[2] + cc[inb, 2]
            lo, cnt = grid.start[key], grid.start[key + 1] - grid.start[key]
            pr = np.repeat(r, cnt)
            first = np.repeat(np.cumsum(cnt) - cnt, cnt)
            k = np.arange(len(pr)) - first + np.repeat(lo, cnt)
            dx = grid.pts[k, 0] - moved[pr, 0]
            dy = grid.pts[k, 1] - moved[pr, 1]
            dz = grid.pts[k, 2] - moved[pr, 2]
            hit[pr[dx * dx + dy * dy + dz * dz <= d2max]] = True
        out[h0 : h0 + len(R)] = np.count_nonzero(hit.reshape(len(R), ns), axis=1) / ns


def lcp_scores(src: np.ndarray, rots: np.ndarray, trans: np.ndarray, grid: _Grid, floor: float = 0.0) -> np.ndarray:
    """LCP of each hypothesis ``(rots[c], trans[c])``.

    Scores below ``floor`` (a fraction) may come back as underestimates:
    the numba kernel stops counting once a hypothesis can no longer reach
    the best seen so far. Exact scores, and therefore the argmax, are
    unaffected.
    """
    out = np.zeros(len(rots))
    if not len(rots):
        return out
    rots = np.ascontiguousarray(rots, dtype=np.float64)
    trans = np.ascontiguousarray(trans, dtype=np.float64)
    if _backend.use_numba():
        g = (grid.pts, grid.start, grid.origin, grid.dims, grid.cell, grid.delta)
        order = np.arange(len(rots))
        if len(rots) > 1 and len(src) > 2 * LCP_PREFIX:
            # a short prefix pass ranks hypotheses so the pruning floor rises early
            pre = np.zeros(len(rots))
            _lcp_kernel(src[:LCP_PREFIX], rots, trans, *g, 0, order, pre)
            order = np.argsort(-pre, kind="stable")
        nfloor = int(np.ceil(floor * len(src) - 1e-9))
        _lcp_kernel(src, rots, trans, *g, nfloor, order, out)
    else:
        _lcp_numpy(src, rots, trans, grid, out)
    return out


def lcp_score(model: PointCloud, cluster: PointCloud, t: RigidTransform, delta: float) -> float:
    """Fraction of model points within ``delta`` of the cluster after ``t``."""
    grid = _Grid(cluster.points, delta)
    src = np.ascontiguousarray(model.points)
    return float(lcp_scores(src, t.rotation[None], t.translation[None], grid)[0])


# -- bases -----------------------------------------------------------------


def _line_ratios(a, b, c, d):
    """Parameters of the closest approach of lines ab and cd, and its gap."""
    u = b - a
    v = d - c
    w = a - c
    uu, uv, vv, uw, vw = u @ u, u @ v, v @ v, u @ w, v @ w
    den = uu * vv - uv * uv
    if den <= 1e-12 * uu * vv:
        return None
    s = (uv * vw - vv * uw) / den
    t = (uu * vw - uv * uw) / den
    gap = np.linalg.norm((a + s * u) - (c + t * v))
    return s, t, gap


def _pick_base(pts: np.ndarray, rng: np.random.Generator, wide: float, delta: float):
    """Four model points: a,b and c,d whose segments cross. None if not found."""
    n = len(pts)
    for _ in range(50):
        a = int(rng.integers(n))
        da = np.linalg.norm(pts - pts[a], axis=1)
        far = np.flatnonzero(da >= 0.5 * wide)
        if len(far) < 2:
            continue
        b = int(far[rng.integers(len(far))])
        ab = pts[b] - pts[a]
        nrm_ab = np.linalg.norm(ab)
        # c away from both a and b and off the line ab
        off = np.linalg.norm(np.cross(pts - pts[a], ab / nrm_ab), axis=1)
        cand = np.flatnonzero((off >= 0.25 * wide) & (da >= 0.25 * wide))
        if not len(cand):
            continue
        c = int(cand[rng.integers(len(cand))])
        normal = np.cross(ab, pts[c] - pts[a])
        normal /= np.linalg.norm(normal)
        dist_plane = np.abs((pts - pts[a]) @ normal)
        dcand = np.flatnonzero(dist_plane <= 0.5 * delta)
        dcand = dcand[(dcand != a) & (dcand != b) & (dcand != c)]
        best, best_key = None, -np.inf
        for d in dcand:
            r = _line_ratios(pts[a], pts[b], pts[c], pts[d])
            if r is None:
                continue
            s, t, gap = r
            if not (0.15 <= s <= 0.85 and 0.15 <= t <= 0.85) or gap > 0.5 * delta:
                continue
            width = np.linalg.norm(pts[d] - pts[c])
            if width > best_key:
                best, best_key = (a, b, c, int(d), float(s), float(t)), width
        if best is not None:
            return best
    return None


def _congruent_sets(q: np.ndarray, base_pts: np.ndarray, r1: float, r2: float, eps: float) -> np.ndarray:
    """Index quadruples in ``q`` approximately congruent to the base."""
    a, b, c, d = base_pts
    d1 = float(np.linalg.norm(b - a))
    d2 = float(np.linalg.norm(d - c))
    p1 = band_pairs(q, d1, eps)
    p2 = band_pairs(q, d2, eps)
    if not len(p1) or not len(p2):
        return np.empty((0, 4), np.int64)
    p1 = np.concatenate([p1, p1[:, ::-1]])
    p2 = np.concatenate([p2, p2[:, ::-1]])
    e1 = q[p1[:, 0]] + r1 * (q[p1[:, 1]] - q[p1[:, 0]])
    e2 = q[p2[:, 0]] + r2 * (q[p2[:, 1]] - q[p2[:, 0]])
    tree = KdTree(e2)
    off, nb = tree.query_radius(e1, eps)
    rows = np.repeat(np.arange(len(p1)), np.diff(off))
    quads = np.concatenate([p1[rows], p2[nb]], axis=1)
    if not len(quads):
        return quads
    # the angle between diagonals is also invariant
    u = b - a
    v = d - c
    cos0 = abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    qu = q[quads[:, 1]] - q[quads[:, 0]]
    qv = q[quads[:, 3]] - q[quads[:, 2]]
    cosq = np.abs(np.einsum("ij,ij->i", qu, qv)) / (np.linalg.norm(qu, axis=1) * np.linalg.norm(qv, axis=1))
    quads = quads[np.abs(cosq - cos0) <= 0.1]
    # remaining cross distances
    for i, j in ((0, 2), (0, 3), (1, 2), (1, 3)):
        ref = np.linalg.norm(base_pts[i] - base_pts[j])
        got = np.linalg.norm(q[quads[:, i]] - q[quads[:, j]], axis=1)
        quads = quads[np.abs(got - ref) <= 2.0 * eps]
    return quads


def _kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotations/translations mapping ``src`` (4,3) onto each ``dst`` (C,4,3)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=1)
    H = np.einsum("ki,ckj->cij", src - cs, dst - cd[:, None, :])
    U, _, Vt = np.linalg.svd(H)
    det = np.linalg.det(Vt) * np.linalg.det(U)
    D = np.ones((len(dst), 3))
    D[:, 2] = np.sign(det)
    D[D == 0] = 1.0
    R = np.einsum("cji,cj,ckj->cik", Vt, D, U)
    t = cd - np.einsum("cij,j->ci", R, cs)
    return R, t


def _sample(pts: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(pts) <= n:
        return pts
    return pts[np.sort(rng.choice(len(pts), n, replace=False))]


def register_4pcs(model: PointCloud, cluster: PointCloud, cfg: FourPcsConfig = FourPcsConfig()) -> CoarseResult:
    """Best rigid map of ``model`` onto ``cluster`` found by congruent 4-point bases.

    Pairs are matched with tolerance ``max(delta, s)``, where ``s`` is the
    median nearest-neighbour spacing of the cluster sample: two independent
    samplings of one surface never share exact points, so congruence can
    only hold to the sampling resolution.
    """
    if len(model) < 4 or len(cluster) < 4:
        raise TooFewPoints("4PCS needs at least 4 points in each cloud")
    rng = np.random.default_rng(cfg.rng_seed)
    p = _sample(model.points, cfg.sample_size, rng)
    q = _sample(cluster.points, cfg.sample_size, rng)
    lcp_src = np.ascontiguousarray(_sample(model.points, cfg.lcp_sample, rng))
    lcp_dst = _sample(cluster.points, LCP_CLUSTER_MAX, rng)
    grid = _Grid(lcp_dst, cfg.delta)
    _, sp = KdTree(q).query_knn(q, 2)
    eps = max(cfg.delta, float(np.median(sp[:, 1])))
    ext = np.linalg.norm(q.max(axis=0) - q.min(axis=0))
    wide = cfg.overlap_estimate * min(ext, np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    best_score, best_t, tried = -1.0, None, 0
    for _ in range(cfg.max_bases):
        base = _pick_base(p, rng, wide, cfg.delta)
        tried += 1
        if base is None:
            continue
        a, b, c, d, r1, r2 = base
        bpts = p[[a, b, c, d]]
        quads = _congruent_sets(q, bpts, r1, r2, eps)
        if not len(quads):
            continue
        R, t = _kabsch_batch(bpts, q[quads])
        resid = np.linalg.norm(np.einsum("cij,kj->cki", R, bpts) + t[:, None, :] - q[quads], axis=2).max(axis=1)
        keep = np.flatnonzero(resid <= eps)
        if len(keep) > MAX_HYPOTHESES:
            keep = keep[np.argsort(resid[keep], kind="stable")[:MAX_HYPOTHESES]]
        R, t = R[keep], t[keep]
        if not len(R):
            continue
        scores = lcp_scores(lcp_src, R, t, grid, max(best_score, 0.0))
        k = int(np.argmax(scores))
        if scores[k] > best_score:
            best_score = float(scores[k])
            best_t = RigidTransform(R[k], t[k])
        if best_score >= cfg.stop_score:
            break
    if best_t is None or best_score < cfg.overlap_estimate / 2:
        raise NoCongruentBase(
            f"no congruent base reached LCP {cfg.overlap_estimate / 2:.3f} (best {max(best_score, 0.0):.3f})"
        )
    return CoarseResult(best_t, best_score, tried)


# -- segmentation pipeline -------------------------------------------------


def yaw_invariant_volume(cloud: PointCloud, samples: int = 36) -> float:
    """Smallest axis-aligned box volume over yaw rotations about z."""
    pts = cloud.points
    best = np.inf
    for k in range(samples):
        r = rot_z(np.pi / 2 * k / samples)
        q = pts @ r.T
        best = min(best, float(np.prod(q.max(axis=0) - q.min(axis=0))))
    return best


def segment_then_register(
    scene: PointCloud,
    model: PointCloud,
    plane_cfg: PlaneRemovalConfig = PlaneRemovalConfig(),
    cluster_cfg: ClusterConfig = ClusterConfig(),
    cfg: FourPcsConfig = FourPcsConfig(),
    icp_cfg: IcpConfig = IcpConfig(),
) -> RegistrationResult:
    """Remove planes, cluster, and align the model to each robot-sized cluster.

    ICP refines against the full scene so the floor still supports the
    model's underside. Clusters whose box diagonal is within ``SIZE_GATE`` times the model's
    are tried; the lowest final rms wins. When every size-compatible
    cluster is larger than ``MERGED_VOLUME_FACTOR`` times the model's
    (yaw-minimised) box volume, the robot has fused with nearby furniture
    and SegmentationFailed is raised.
    """
    if len(scene) == 0:
        raise SegmentationFailed("scene is empty")
    rest, _ = remove_planes(scene, plane_cfg)
    if len(rest) == 0:
        raise SegmentationFailed("nothing left after plane removal")
    clusters = euclidean_cluster(rest, cluster_cfg)
    mdiag = model.bounds().diagonal
    mvol = yaw_invariant_volume(model)
    sized = [c for c in clusters if SIZE_GATE[0] * mdiag <= c.bounds().diagonal <= SIZE_GATE[1] * mdiag]
    if not sized:
        raise SegmentationFailed("no cluster of robot size")
    usable = [c for c in sized if yaw_invariant_volume(c) <= MERGED_VOLUME_FACTOR * mvol]
    if not usable:
        raise SegmentationFailed("robot cluster merged with surrounding objects")
    tree = KdTree(scene.points)
    best: RegistrationResult | None = None
    for i, c in enumerate(usable):
        try:
            coarse = register_4pcs(model, c, cfg)
        except (NoCongruentBase, TooFewPoints):
            continue
        res = register_icp(model, scene, coarse.transform, icp_cfg, tree)
        if not res.converged:
            continue
        if best is None or res.rms_mm < best.rms_mm:
            info = dict(res.info, lcp_score=coarse.lcp_score, bases_tried=coarse.bases_tried, cluster_index=i)
            best = RegistrationResult(res.transform, res.rms_mm, res.iterations_used, True, info)
    if best is None:
        raise SegmentationFailed("no robot-sized cluster could be aligned")
    return best
