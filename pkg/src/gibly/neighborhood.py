"""Uniform-grid radius search, multi-scale neighbourhoods and farthest point sampling.

All searches are exact: a neighbour ``i`` of query ``q`` at radius ``r`` is any
point with ``dx*dx + dy*dy + dz*dz <= r*r`` where ``(dx, dy, dz) = p_i - q``.
The query's own index is part of its neighbourhood when the query is a cloud
point.

Multi-scale neighbourhoods are nested (radii grow), so they are stored once as
a CSR table over the largest radius plus a per-pair *level*: the smallest scale
whose radius contains the pair. The set at scale ``s`` is every pair with
``level <= s``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit, prange
from .errors import KOutOfRange, NonPositiveCellSize

# Relative slack on the cell range scanned per query; keeps rounding in the
# cell assignment from ever dropping a boundary point.
_RANGE_SLACK = 1e-9
_NUMPY_CHUNK = 4096


@dataclass
class PointCloud:
    """N points with optional per-point features (N, C) and integer labels (N,)."""

    coords: np.ndarray
    features: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (N, 3), got {coords.shape}")
        if coords.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        self.coords = coords
        n = coords.shape[0]
        if self.features is not None:
            feats = np.ascontiguousarray(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != n:
                raise ValueError(f"features have {feats.shape[0]} rows, cloud has {n} points")
            self.features = feats
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
            if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
                raise ValueError("labels must be non-negative integers")
            self.labels = labels.astype(np.int64)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def num_features(self):
        return 0 if self.features is None else self.features.shape[1]

    def feature_matrix(self):
        """Input features as an (N, C) array, (N, 0) when there are none."""
        if self.features is None:
            return np.zeros((len(self), 0))
        return self.features

    def subset(self, indices):
        indices = np.asarray(indices)
        return PointCloud(
            self.coords[indices],
            None if self.features is None else self.features[indices],
            None if self.labels is None else self.labels[indices],
        )


@dataclass(frozen=True)
class ScaleSchedule:
    """Radii ``base_radius * factor**s`` for ``s = 0 .. num_scales - 1``."""

    base_radius: float = 0.4
    factor: float = 2.0
    num_scales: int = 3

    def __post_init__(self):
        if not self.base_radius > 0:
            raise ValueError("base_radius must be positive")
        if not self.factor > 1:
            raise ValueError("factor must exceed 1 so radii strictly increase")
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")

    @property
    def radii(self):
        return tuple(self.base_radius * self.factor**s for s in range(self.num_scales))


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Immutable uniform grid over a point cloud.

    Points are bucketed by ``floor((p - origin) / cell_size)``. Occupied cells
    are stored as sorted linear keys with CSR offsets into ``order``; within a
    cell, point indices ascend.
    """

    cell_size: float
    origin: np.ndarray
    dims: np.ndarray
    keys: np.ndarray
    cell_start: np.ndarray
    order: np.ndarray
    source: PointCloud = field(repr=False, compare=False)

    @property
    def coords(self):
        return self.source.coords

    @property
    def grid(self):
        """Mapping from integer cell triple to the point indices it holds."""
        nx, ny, nz = (int(d) for d in self.dims)
        out = {}
        for c, key in enumerate(self.keys):
            key = int(key)
            cell = (key // (ny * nz), (key // nz) % ny, key % nz)
            out[cell] = self.order[self.cell_start[c]:self.cell_start[c + 1]].tolist()
        return out


def build_index(cloud, cell_size):
    """Bucket ``cloud`` into a uniform grid with cubic cells of side ``cell_size``."""
    cell_size = float(cell_size)
    if not cell_size > 0 or not np.isfinite(cell_size):
        raise NonPositiveCellSize(f"cell_size must be positive, got {cell_size}")
    coords = cloud.coords
    origin = coords.min(axis=0)
    ijk = np.floor((coords - origin) / cell_size).astype(np.int64)
    dims = ijk.max(axis=0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) > 2.0**62:
        raise NonPositiveCellSize("cell_size is too small for the cloud extent")
    keys = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(keys, kind="stable")
    ukeys, starts = np.unique(keys[order], return_index=True)
    cell_start = np.append(starts, len(order)).astype(np.int64)
    arrays = [origin, dims, ukeys, cell_start, order]
    for a in arrays:
        a.setflags(write=False)
    return NeighborhoodIndex(cell_size, origin, dims, ukeys, cell_start, order, cloud)


@dataclass
class NeighborTable:
    """CSR neighbour lists for a batch of queries at several nested radii.

    ``idx[ptr[q]:ptr[q+1]]`` are the neighbours of query ``q`` at the largest
    radius in ascending index order; ``level`` gives each pair's smallest
    containing scale; ``counts[q, s]`` is the neighbourhood size at scale ``s``.
    """

    ptr: np.ndarray
    idx: np.ndarray
    level: np.ndarray
    counts: np.ndarray
    radii: tuple

    @property
    def num_queries(self):
        return self.ptr.shape[0] - 1

    @property
    def num_pairs(self):
        return self.idx.shape[0]

    def neighbors(self, q, scale=None):
        lo, hi = self.ptr[q], self.ptr[q + 1]
        nb = self.idx[lo:hi]
        if scale is None:
            return nb.astype(np.int64)
        return nb[self.level[lo:hi] <= scale].astype(np.int64)

    def query_of_pair(self):
        return np.repeat(np.arange(self.num_queries), np.diff(self.ptr))


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@njit
def _cell_range(q, origin, cell, dims, r):
    lo = np.empty(3, np.int64)
    hi = np.empty(3, np.int64)
    slack = _RANGE_SLACK * (r + abs(q[0]) + abs(q[1]) + abs(q[2]) + 1.0)
    for a in range(3):
        first = int(np.floor((q[a] - r - slack - origin[a]) / cell))
        last = int(np.floor((q[a] + r + slack - origin[a]) / cell))
        lo[a] = max(first, 0)
        hi[a] = min(last, dims[a] - 1)
    return lo, hi


@njit
def _scan_query(q, coords, origin, cell, dims, keys, cstart, order, r2, r, out_idx, out_d2):
    """Visit candidate cells; write in-radius points to ``out_*`` when given, return count."""
    lo, hi = _cell_range(q, origin, cell, dims, r)
    n = 0
    write = out_idx.shape[0] > 0
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            base = (i * dims[1] + j) * dims[2]
            k0 = base + lo[2]
            pos = np.searchsorted(keys, k0)
            while pos < keys.shape[0] and keys[pos] <= base + hi[2]:
                for t in range(cstart[pos], cstart[pos + 1]):
                    p = order[t]
                    dx = coords[p, 0] - q[0]
                    dy = coords[p, 1] - q[1]
                    dz = coords[p, 2] - q[2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r2:
                        if write:
                            out_idx[n] = p
                            out_d2[n] = d2
                        n += 1
                pos += 1
    return n


@njit(parallel=True)
def _count_nb(coords, queries, origin, cell, dims, keys, cstart, order, r2, r):
    nq = queries.shape[0]
    nin = np.empty(nq, np.int64)
    dummy_i = np.empty(0, np.int64)
    dummy_d = np.empty(0)
    for qi in prange(nq):
        nin[qi] = _scan_query(queries[qi], coords, origin, cell, dims, keys, cstart, order,
                              r2, r, dummy_i, dummy_d)
    return nin


@njit(parallel=True)
def _fill_nb(coords, queries, origin, cell, dims, keys, cstart, order, radii2, r, nin, ptr,
             cap, idx, level):
    nq = queries.shape[0]
    r2 = radii2[radii2.shape[0] - 1]
    for qi in prange(nq):
        n = nin[qi]
        tmp_i = np.empty(n, np.int64)
        tmp_d = np.empty(n)
        _scan_query(queries[qi], coords, origin, cell, dims, keys, cstart, order, r2, r,
                    tmp_i, tmp_d)
        o = np.argsort(tmp_i)
        tmp_i = tmp_i[o]
        tmp_d = tmp_d[o]
        if cap > 0 and n > cap:
            # stable sort by distance; ties keep ascending index
            near = np.argsort(tmp_d, kind="mergesort")[:cap]
            near = np.sort(near)
            tmp_i = tmp_i[near]
            tmp_d = tmp_d[near]
        start = ptr[qi]
        for t in range(tmp_i.shape[0]):
            idx[start + t] = tmp_i[t]
            lv = 0
            while tmp_d[t] > radii2[lv]:
                lv += 1
            level[start + t] = lv


@njit
def _fps_nb(coords, k, seed):
    n = coords.shape[0]
    mind = np.full(n, np.inf)
    sel = np.empty(k, np.int64)
    sel[0] = seed
    mind[seed] = -1.0
    cur = seed
    best = np.inf
    for s in range(1, k):
        best = -1.0
        bi = -1
        cx, cy, cz = coords[cur, 0], coords[cur, 1], coords[cur, 2]
        for i in range(n):
            dx = coords[i, 0] - cx
            dy = coords[i, 1] - cy
            dz = coords[i, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best:
                best = mind[i]
                bi = i
        sel[s] = bi
        mind[bi] = -1.0
        cur = bi
    return sel, best


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------


def _expand_ranges(starts, counts):
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64)
    offs = np.repeat(starts - np.cumsum(counts) + counts, counts)
    return offs + np.arange(total)


def _pairs_numpy(index, queries, r):
    """All (query, point, d2) with d2 <= r*r for a chunk of queries."""
    coords = index.coords
    cell = index.cell_size
    slack = _RANGE_SLACK * (r + np.abs(queries).sum(axis=1) + 1.0)[:, None]
    lo = np.floor((queries - r - slack - index.origin) / cell).astype(np.int64)
    hi = np.floor((queries + r + slack - index.origin) / cell).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, index.dims - 1)
    span = np.maximum(hi - lo + 1, 0)
    if span.size == 0 or span.max() == 0:
        e = np.zeros(0, np.int64)
        return e, e, np.zeros(0)
    qs, ps, ds = [], [], []
    qids = np.arange(len(queries))
    r2 = r * r
    ny, nz = index.dims[1], index.dims[2]
    for di in range(span[:, 0].max()):
        for dj in range(span[:, 1].max()):
            for dk in range(span[:, 2].max()):
                ok = (di < span[:, 0]) & (dj < span[:, 1]) & (dk < span[:, 2])
                if not ok.any():
                    continue
                key = ((lo[ok, 0] + di) * ny + lo[ok, 1] + dj) * nz + lo[ok, 2] + dk
                pos = np.searchsorted(index.keys, key)
                pos_c = np.minimum(pos, len(index.keys) - 1)
                found = index.keys[pos_c] == key
                q_found = qids[ok][found]
                cstart = index.cell_start[pos_c[found]]
                cnt = index.cell_start[pos_c[found] + 1] - cstart
                slots = _expand_ranges(cstart, cnt)
                pts = index.order[slots]
                qrep = np.repeat(q_found, cnt)
                d = coords[pts] - queries[qrep]
                d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
                keep = d2 <= r2
                qs.append(qrep[keep])
                ps.append(pts[keep])
                ds.append(d2[keep])
    if not qs:
        e = np.zeros(0, np.int64)
        return e, e, np.zeros(0)
    return np.concatenate(qs), np.concatenate(ps), np.concatenate(ds)


def _table_chunk_numpy(index, queries, radii, cap):
    r = radii[-1]
    q, p, d2 = _pairs_numpy(index, queries, r)
    if cap and cap > 0:
        o = np.lexsort((p, d2, q))
        q, p, d2 = q[o], p[o], d2[o]
        first = np.searchsorted(q, q, side="left")
        keep = (np.arange(len(q)) - first) < cap
        q, p, d2 = q[keep], p[keep], d2[keep]
    o = np.lexsort((p, q))
    q, p, d2 = q[o], p[o], d2[o]
    radii2 = np.array([rr * rr for rr in radii])
    level = np.searchsorted(radii2, d2, side="left").astype(np.int8)
    cnt = np.bincount(q, minlength=len(queries))
    return cnt, p.astype(np.int32), level


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def neighbor_table(index, queries, radii, max_neighbors=None):
    """Neighbours of every query at each radius in ``radii`` (ascending).

    ``max_neighbors`` caps every scale at that many closest points (ties by
    index); nestedness is preserved because the closest-k set inside a smaller
    ball is always contained in the closest-k set inside a larger one.
    """
    radii = tuple(float(r) for r in radii)
    if not radii or any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly increasing")
    queries = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    cap = int(max_neighbors) if max_neighbors else 0
    nq = queries.shape[0]
    radii2 = np.array([r * r for r in radii])
    if _accel.use_numba():
        args = (index.coords, queries, index.origin, index.cell_size, index.dims,
                index.keys, index.cell_start, index.order)
        nin = _count_nb(*args, radii2[-1], radii[-1])
        sizes = np.minimum(nin, cap) if cap > 0 else nin
        ptr = np.zeros(nq + 1, np.int64)
        np.cumsum(sizes, out=ptr[1:])
        idx = np.empty(ptr[-1], np.int32)
        level = np.empty(ptr[-1], np.int8)
        _fill_nb(*args, radii2, radii[-1], nin, ptr, cap, idx, level)
    else:
        starts = range(0, nq, _NUMPY_CHUNK)
        parts = _accel.map_chunks(
            lambda s: _table_chunk_numpy(index, queries[s:s + _NUMPY_CHUNK], radii, cap), starts)
        sizes = np.concatenate([c for c, _, _ in parts]) if parts else np.zeros(0, np.int64)
        ptr = np.zeros(nq + 1, np.int64)
        np.cumsum(sizes, out=ptr[1:])
        idx = np.concatenate([p for _, p, _ in parts]) if parts else np.zeros(0, np.int32)
        level = np.concatenate([lv for _, _, lv in parts]) if parts else np.zeros(0, np.int8)
    qp = np.repeat(np.arange(nq), np.diff(ptr))
    per_level = np.zeros((nq, len(radii)), np.int64)
    np.add.at(per_level, (qp, level.astype(np.int64)), 1)
    counts = np.cumsum(per_level, axis=1)
    return NeighborTable(ptr, idx, level, counts, radii)


def radius_neighbors(index, query, radius):
    """Indices ``i`` with ``|p_i - query| <= radius`` in ascending order."""
    radius = float(radius)
    if not radius > 0:
        raise ValueError("radius must be positive")
    table = neighbor_table(index, np.asarray(query, dtype=np.float64).reshape(1, 3), (radius,))
    return table.neighbors(0)


def multi_scale_neighborhoods(index, queries, schedule):
    """``result[q][s]``: neighbours of query ``q`` at radius ``schedule.radii[s]``."""
    table = neighbor_table(index, queries, schedule.radii)
    return [[table.neighbors(q, s) for s in range(len(schedule.radii))]
            for q in range(table.num_queries)]


def farthest_point_sample(cloud, k, seed_index=0, return_radius=False):
    """Greedy farthest point sampling starting at ``seed_index``.

    Each step adds the point whose distance to the selected set is largest,
    smallest index on ties. Returns the indices in selection order, and with
    ``return_radius`` also the min-distance of the last pick: after the call
    every point lies within that distance of a selected point.
    """
    coords = cloud.coords
    n = coords.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise KOutOfRange(f"k must be in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise KOutOfRange(f"seed_index must be in [0, {n}), got {seed_index}")
    if _accel.use_numba():
        sel, best = _fps_nb(coords, k, int(seed_index))
    else:
        sel, best = _fps_numpy(coords, k, int(seed_index))
    radius = float(np.sqrt(best)) if k > 1 else float("inf")
    return (sel, radius) if return_radius else sel


def _fps_numpy(coords, k, seed):
    mind = np.full(coords.shape[0], np.inf)
    sel = np.empty(k, np.int64)
    sel[0] = seed
    mind[seed] = -1.0
    cur = seed
    best = np.inf
    for s in range(1, k):
        d = coords - coords[cur]
        np.minimum(mind, d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2], out=mind)
        cur = int(np.argmax(mind))
        best = mind[cur]
        sel[s] = cur
        mind[cur] = -1.0
    return sel, best
