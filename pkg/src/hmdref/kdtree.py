"""Exact k-d tree with nearest, k-nearest and radius queries.

The tree is a flat array structure built with numpy. Queries run through a
numba traversal kernel, or through a chunked brute-force scan when numba is
disabled. Both paths return identical indices: distance ties go to the
lowest point index.
"""

from __future__ import annotations

import numpy as np

from . import _backend
from ._backend import njit
from .errors import EmptyCloud
from .geom import PointCloud

LEAF_SIZE = 16
_BRUTE_CHUNK = 1_500_000  # query x point pairs per numpy chunk


# -- numba kernels ---------------------------------------------------------


@njit
def _box_d2(qx, qy, qz, bmin, bmax, nd):
    d = 0.0
    v = bmin[nd, 0] - qx
    if v > 0.0:
        d += v * v
    else:
        v = qx - bmax[nd, 0]
        if v > 0.0:
            d += v * v
    v = bmin[nd, 1] - qy
    if v > 0.0:
        d += v * v
    else:
        v = qy - bmax[nd, 1]
        if v > 0.0:
            d += v * v
    v = bmin[nd, 2] - qz
    if v > 0.0:
        d += v * v
    else:
        v = qz - bmax[nd, 2]
        if v > 0.0:
            d += v * v
    return d


@njit
def _nn_kernel(pts, perm, lo, hi, left, right, bmin, bmax, queries, bound2, hint, out_idx, out_d2):
    n = pts.shape[0]
    stack = np.empty(256, np.int64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = bound2
        besti = n
        h = hint[qi]
        if h >= 0:
            # a previous match is an upper bound; ties still resolve to the lowest index
            dx = pts[h, 0] - qx
            dy = pts[h, 1] - qy
            dz = pts[h, 2] - qz
            dd = dx * dx + dy * dy + dz * dz
            if dd <= best:
                best = dd
                besti = h
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if _box_d2(qx, qy, qz, bmin, bmax, nd) > best:
                continue
            if left[nd] < 0:
                for k in range(lo[nd], hi[nd]):
                    i = perm[k]
                    dx = pts[i, 0] - qx
                    dy = pts[i, 1] - qy
                    dz = pts[i, 2] - qz
                    dd = dx * dx + dy * dy + dz * dz
                    if dd < best or (dd == best and i < besti):
                        best = dd
                        besti = i
            else:
                l = left[nd]
                r = right[nd]
                if _box_d2(qx, qy, qz, bmin, bmax, l) <= _box_d2(qx, qy, qz, bmin, bmax, r):
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        if besti == n:
            out_idx[qi] = -1
            out_d2[qi] = np.inf
        else:
            out_idx[qi] = besti
            out_d2[qi] = best


@njit
def _box_far2(qx, qy, qz, bmin, bmax, nd):
    a = max(abs(bmin[nd, 0] - qx), abs(bmax[nd, 0] - qx))
    b = max(abs(bmin[nd, 1] - qy), abs(bmax[nd, 1] - qy))
    c = max(abs(bmin[nd, 2] - qz), abs(bmax[nd, 2] - qz))
    return a * a + b * b + c * c


@njit
def _radius_kernel(pts, perm, lo, hi, left, right, bmin, bmax, queries, r2, counts, out, fill):
    # fill=False: only count; fill=True: write into out at offsets given by counts
    stack = np.empty(256, np.int64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        c = 0
        base = counts[qi] if fill else 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if _box_d2(qx, qy, qz, bmin, bmax, nd) > r2:
                continue
            if _box_far2(qx, qy, qz, bmin, bmax, nd) <= r2:
                # whole node inside the sphere; rounding is monotone so this is exact
                if fill:
                    for k in range(lo[nd], hi[nd]):
                        out[base + c] = perm[k]
                        c += 1
                else:
                    c += hi[nd] - lo[nd]
            elif left[nd] < 0:
                for k in range(lo[nd], hi[nd]):
                    i = perm[k]
                    dx = pts[i, 0] - qx
                    dy = pts[i, 1] - qy
                    dz = pts[i, 2] - qz
                    if dx * dx + dy * dy + dz * dz <= r2:
                        if fill:
                            out[base + c] = i
                        c += 1
            else:
                stack[sp] = left[nd]
                stack[sp + 1] = right[nd]
                sp += 2
        if fill:
            out[base : base + c] = np.sort(out[base : base + c])
        else:
            counts[qi] = c


@njit
def _radius_gather(pts, perm, lo, hi, left, right, bmin, bmax, qx, qy, qz, r2, buf, stack):
    """Write neighbour indices of one query into ``buf`` (traversal order).

    Returns the full count; entries beyond ``len(buf)`` are not written,
    so a caller seeing ``count > len(buf)`` must grow the buffer and retry.
    """
    cap = buf.shape[0]
    c = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        nd = stack[sp]
        if _box_d2(qx, qy, qz, bmin, bmax, nd) > r2:
            continue
        if _box_far2(qx, qy, qz, bmin, bmax, nd) <= r2:
            for k in range(lo[nd], hi[nd]):
                if c < cap:
                    buf[c] = perm[k]
                c += 1
        elif left[nd] < 0:
            for k in range(lo[nd], hi[nd]):
                i = perm[k]
                dx = pts[i, 0] - qx
                dy = pts[i, 1] - qy
                dz = pts[i, 2] - qz
                if dx * dx + dy * dy + dz * dz <= r2:
                    if c < cap:
                        buf[c] = i
                    c += 1
        else:
            stack[sp] = left[nd]
            stack[sp + 1] = right[nd]
            sp += 2
    return c


@njit
def _knn_kernel(pts, perm, lo, hi, left, right, bmin, bmax, queries, k, out_idx, out_d2):
    stack = np.empty(256, np.int64)
    bd = np.empty(k, np.float64)
    bi = np.empty(k, np.int64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        m = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if m == k and _box_d2(qx, qy, qz, bmin, bmax, nd) > bd[k - 1]:
                continue
            if left[nd] < 0:
                for kk in range(lo[nd], hi[nd]):
                    i = perm[kk]
                    dx = pts[i, 0] - qx
                    dy = pts[i, 1] - qy
                    dz = pts[i, 2] - qz
                    dd = dx * dx + dy * dy + dz * dz
                    if m == k and (dd > bd[k - 1] or (dd == bd[k - 1] and i > bi[k - 1])):
                        continue
                    # insertion into the sorted (distance, index) list
                    j = m if m < k else k - 1
                    while j > 0 and (bd[j - 1] > dd or (bd[j - 1] == dd and bi[j - 1] > i)):
                        if j < k:
                            bd[j] = bd[j - 1]
                            bi[j] = bi[j - 1]
                        j -= 1
                    bd[j] = dd
                    bi[j] = i
                    if m < k:
                        m += 1
            else:
                l = left[nd]
                r = right[nd]
                if _box_d2(qx, qy, qz, bmin, bmax, l) <= _box_d2(qx, qy, qz, bmin, bmax, r):
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        for j in range(k):
            out_idx[qi, j] = bi[j]
            out_d2[qi, j] = bd[j]


# -- numpy fallbacks -------------------------------------------------------


def _chunks(nq: int, n: int):
    step = max(1, _BRUTE_CHUNK // max(n, 1))
    for s in range(0, nq, step):
        yield s, min(nq, s + step)


def _sq_dists(pts: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = pts[None, :, :] - q[:, None, :]
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def _nn_numpy(pts, queries, bound2):
    nq = len(queries)
    idx = np.empty(nq, np.int64)
    d2 = np.empty(nq, np.float64)
    for s, e in _chunks(nq, len(pts)):
        dd = _sq_dists(pts, queries[s:e])
        i = np.argmin(dd, axis=1)  # first minimum == lowest index
        idx[s:e] = i
        d2[s:e] = dd[np.arange(e - s), i]
    out = d2 > bound2
    idx[out] = -1
    d2[out] = np.inf
    return idx, d2


def _radius_numpy(pts, queries, r2):
    nq = len(queries)
    counts = np.zeros(nq, np.int64)
    cols = []
    for s, e in _chunks(nq, len(pts)):
        rows, c = np.nonzero(_sq_dists(pts, queries[s:e]) <= r2)
        counts[s:e] = np.bincount(rows, minlength=e - s)
        cols.append(c)
    offsets = np.zeros(nq + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    ind = np.concatenate(cols).astype(np.int64) if cols else np.empty(0, np.int64)
    return offsets, ind


def _knn_numpy(pts, queries, k):
    nq = len(queries)
    idx = np.empty((nq, k), np.int64)
    d2 = np.empty((nq, k), np.float64)
    for s, e in _chunks(nq, len(pts)):
        dd = _sq_dists(pts, queries[s:e])
        # everything up to the k-th distance, then (distance, index) order per row
        kth = np.partition(dd, k - 1, axis=1)[:, k - 1]
        rows, cols = np.nonzero(dd <= kth[:, None])
        order = np.lexsort((cols, dd[rows, cols], rows))
        rows, cols = rows[order], cols[order]
        start = np.searchsorted(rows, np.arange(e - s))
        take = (start[:, None] + np.arange(k)).ravel()
        sel = cols[take].reshape(e - s, k)
        idx[s:e] = sel
        d2[s:e] = np.take_along_axis(dd, sel, axis=1)
    return idx, d2


# -- tree ------------------------------------------------------------------


def _build_arrays(points: np.ndarray, leafsize: int):
    n = len(points)
    perm = np.arange(n, dtype=np.int64)
    lo, hi, left, right = [0], [n], [-1], [-1]
    todo = [0]
    while todo:
        nd = todo.pop()
        a, b = lo[nd], hi[nd]
        if b - a <= leafsize:
            continue
        idx = perm[a:b]
        sub = points[idx]
        spread = sub.max(axis=0) - sub.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0.0:
            continue
        mid = (b - a) // 2
        perm[a:b] = idx[np.argpartition(sub[:, dim], mid)]
        for ca, cb in ((a, a + mid), (a + mid, b)):
            lo.append(ca)
            hi.append(cb)
            left.append(-1)
            right.append(-1)
            todo.append(len(lo) - 1)
        left[nd] = len(lo) - 2
        right[nd] = len(lo) - 1
    lo = np.array(lo, np.int64)
    hi = np.array(hi, np.int64)
    left = np.array(left, np.int64)
    right = np.array(right, np.int64)
    m = len(lo)
    bmin = np.empty((m, 3))
    bmax = np.empty((m, 3))
    # children always carry larger ids than their parent
    for nd in range(m - 1, -1, -1):
        if left[nd] < 0:
            sub = points[perm[lo[nd] : hi[nd]]]
            bmin[nd] = sub.min(axis=0)
            bmax[nd] = sub.max(axis=0)
        else:
            bmin[nd] = np.minimum(bmin[left[nd]], bmin[right[nd]])
            bmax[nd] = np.maximum(bmax[left[nd]], bmax[right[nd]])
    return perm, lo, hi, left, right, bmin, bmax


class KdTree:
    """Immutable exact nearest-neighbour index over a set of 3D points."""

    def __init__(self, points, leafsize: int = LEAF_SIZE):
        pts = np.ascontiguousarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
        pts = pts.reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        pts = pts.copy()
        pts.flags.writeable = False
        self.points = pts
        self._arrays = _build_arrays(pts, leafsize)
        for a in self._arrays:
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def _q(queries) -> np.ndarray:
        return np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)

    def query(self, queries, max_dist: float = np.inf, hint=None) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour of every query row.

        Returns ``(indices, distances)``. Queries with no point within
        ``max_dist`` get index -1 and distance inf. ``hint`` may hold a
        guess index per query (-1 for none); it only speeds up the search,
        results are unchanged.
        """
        q = self._q(queries)
        bound2 = float(max_dist) ** 2 if np.isfinite(max_dist) else np.inf
        if _backend.use_numba():
            idx = np.empty(len(q), np.int64)
            d2 = np.empty(len(q), np.float64)
            if hint is None:
                hint = np.full(len(q), -1, np.int64)
            else:
                hint = np.ascontiguousarray(hint, dtype=np.int64)
            if len(q):
                _nn_kernel(self.points, *self._arrays, q, bound2, hint, idx, d2)
        else:
            idx, d2 = _nn_numpy(self.points, q, bound2)
        return idx, np.sqrt(d2)

    def query_knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        q = self._q(queries)
        if not 1 <= k <= len(self.points):
            raise ValueError(f"k={k} out of range for {len(self.points)} points")
        if _backend.use_numba():
            idx = np.empty((len(q), k), np.int64)
            d2 = np.empty((len(q), k), np.float64)
            if len(q):
                _knn_kernel(self.points, *self._arrays, q, int(k), idx, d2)
        else:
            idx, d2 = _knn_numpy(self.points, q, k)
        return idx, np.sqrt(d2)

    def query_radius(self, queries, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """All points within ``radius`` (inclusive) of each query, CSR layout.

        Returns ``(offsets, indices)``; neighbours of query ``i`` are
        ``indices[offsets[i]:offsets[i + 1]]`` in ascending index order.
        """
        q = self._q(queries)
        r2 = float(radius) * float(radius)
        if not _backend.use_numba():
            return _radius_numpy(self.points, q, r2)
        counts = np.zeros(len(q), np.int64)
        dummy = np.empty(0, np.int64)
        if len(q):
            _radius_kernel(self.points, *self._arrays, q, r2, counts, dummy, False)
        offsets = np.zeros(len(q) + 1, np.int64)
        np.cumsum(counts, out=offsets[1:])
        out = np.empty(offsets[-1], np.int64)
        if len(q):
            _radius_kernel(self.points, *self._arrays, q, r2, offsets[:-1].copy(), out, True)
        return offsets, out


def build_kdtree(cloud: PointCloud) -> KdTree:
    return KdTree(cloud)


def nearest(tree: KdTree, q) -> tuple[int, float]:
    idx, d = tree.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(d[0])


def rms_closest_point_mm(model: PointCloud, scene_tree: KdTree) -> float:
    """Root mean square model-to-scene closest-point distance, in millimetres."""
    if len(model) == 0:
        raise EmptyCloud("model cloud is empty")
    _, d = scene_tree.query(model.points)
    return float(np.sqrt(np.mean(d * d)) * 1000.0)
