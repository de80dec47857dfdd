"""Point-cloud container and a uniform-grid spatial index.

Radius and k-nearest queries return neighbors in the canonical order
(distance, then point id). Brute-force versions of both queries live here
too; they are the oracles the grid is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if self.features is None:
            self.features = np.zeros((n, 0))
        else:
            feats = np.asarray(self.features, dtype=np.float64)
            self.features = feats if feats.ndim == 2 and len(feats) == n else feats.reshape(n, -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
            if self.num_classes is not None and n:
                lo, hi = self.labels.min(), self.labels.max()
                if lo < 0 or hi >= self.num_classes:
                    raise GeometryError(
                        f"labels must lie in [0, {self.num_classes - 1}], found [{lo}, {hi}]"
                    )

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.coords[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.num_classes,
        )

    def check_finite(self) -> None:
        bad = np.flatnonzero(~np.isfinite(self.coords).all(axis=1))
        if bad.size:
            raise GeometryError(f"non-finite coordinate at point id {int(bad[0])}")


@dataclass
class NeighborList:
    """Flat CSR-style neighbor table: query q owns indices[offsets[q]:offsets[q+1]]."""

    offsets: np.ndarray
    indices: np.ndarray
    distances: np.ndarray

    @property
    def query_count(self) -> int:
        return len(self.offsets) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, q: int) -> np.ndarray:
        return self.indices[self.offsets[q]:self.offsets[q + 1]]

    def dists(self, q: int) -> np.ndarray:
        return self.distances[self.offsets[q]:self.offsets[q + 1]]

    def padded(self, k: int, self_ids: np.ndarray | None = None) -> np.ndarray:
        """(Q, k) index array: the k nearest, padded by repeating the query id.

        ``self_ids`` gives the cloud id of each query (defaults to the query
        number, i.e. the queries are the cloud itself).
        """
        q = self.query_count
        if self_ids is None:
            self_ids = np.arange(q)
        out = np.repeat(np.asarray(self_ids, dtype=np.int64)[:, None], k, axis=1)
        rank = np.arange(len(self.indices)) - np.repeat(self.offsets[:-1], self.counts())
        keep = rank < k
        rows = np.repeat(np.arange(q), self.counts())[keep]
        out[rows, rank[keep]] = self.indices[keep]
        return out


@dataclass
class GridIndex:
    cell_size: float
    origin: np.ndarray
    dims: np.ndarray
    order: np.ndarray  # point ids sorted by cell key, then id
    keys: np.ndarray  # unique occupied cell keys (ascending)
    starts: np.ndarray  # order[starts[c]:starts[c+1]] live in keys[c]
    point_cells: np.ndarray = field(repr=False)  # (N, 3) integer cell of each point

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin * self.cell_size, (self.origin + self.dims) * self.cell_size

    @property
    def cell_count(self) -> int:
        return len(self.keys)

    def cells(self) -> dict[tuple[int, int, int], list[int]]:
        out = {}
        for c in range(len(self.keys)):
            members = self.order[self.starts[c]:self.starts[c + 1]]
            cell = tuple(int(v) for v in self.point_cells[members[0]])
            out[cell] = [int(m) for m in members]
        return out

    def _key(self, cell: np.ndarray) -> np.ndarray:
        rel = cell - self.origin
        return (rel[..., 0] * self.dims[1] + rel[..., 1]) * self.dims[2] + rel[..., 2]


def build_index(cloud: PointCloud, cell_size: float) -> GridIndex:
    if not cell_size > 0:
        raise GeometryError(f"cell_size must be positive, got {cell_size}")
    cloud.check_finite()
    n = len(cloud)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return GridIndex(float(cell_size), np.zeros(3, np.int64), np.ones(3, np.int64),
                         empty, empty, np.zeros(1, np.int64), np.zeros((0, 3), np.int64))
    cells = np.floor(cloud.coords / cell_size).astype(np.int64)
    origin = cells.min(axis=0)
    dims = cells.max(axis=0) - origin + 1
    index = GridIndex(float(cell_size), origin, dims, None, None, None, cells)
    keys = index._key(cells)
    order = np.lexsort((np.arange(n), keys))
    sorted_keys = keys[order]
    uniq, first = np.unique(sorted_keys, return_index=True)
    index.order = order
    index.keys = uniq
    index.starts = np.append(first, n).astype(np.int64)
    return index


def _candidates(index: GridIndex, queries: np.ndarray, reach: int):
    """All (query, point) pairs whose cells are within ``reach`` cells per axis."""
    qcells = np.floor(queries / index.cell_size).astype(np.int64)
    span = np.arange(-reach, reach + 1)
    offsets = np.stack(np.meshgrid(span, span, span, indexing="ij"), -1).reshape(-1, 3)
    qi_parts, pid_parts = [], []
    lo, hi = index.origin, index.origin + index.dims
    for off in offsets:
        cell = qcells + off
        inside = ((cell >= lo) & (cell < hi)).all(axis=1)
        if not inside.any():
            continue
        qsel = np.flatnonzero(inside)
        key = index._key(cell[qsel])
        pos = np.searchsorted(index.keys, key)
        pos_c = np.minimum(pos, len(index.keys) - 1)
        hit = index.keys[pos_c] == key
        qsel, pos_c = qsel[hit], pos_c[hit]
        if qsel.size == 0:
            continue
        begin = index.starts[pos_c]
        count = index.starts[pos_c + 1] - begin
        total = int(count.sum())
        qrep = np.repeat(qsel, count)
        local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        qi_parts.append(qrep)
        pid_parts.append(index.order[np.repeat(begin, count) + local])
    if not qi_parts:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(qi_parts), np.concatenate(pid_parts)


def _to_neighbor_list(nq: int, qi: np.ndarray, pid: np.ndarray, dist: np.ndarray) -> NeighborList:
    order = np.lexsort((pid, dist, qi))
    qi, pid, dist = qi[order], pid[order], dist[order]
    offsets = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(np.bincount(qi, minlength=nq), out=offsets[1:])
    return NeighborList(offsets, pid.astype(np.int64), dist)


def _pair_distances(coords: np.ndarray, queries: np.ndarray, qi, pid) -> np.ndarray:
    diff = coords[pid] - queries[qi]
    return np.sqrt((diff * diff).sum(axis=1))


def radius_neighbors(index: GridIndex, cloud: PointCloud, queries, r: float) -> NeighborList:
    """Batched ball query: every point within distance <= r of each query."""
    if not r > 0:
        raise GeometryError(f"radius must be positive, got {r}")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    nq = len(queries)
    if len(cloud) == 0 or nq == 0:
        return NeighborList(np.zeros(nq + 1, np.int64), np.zeros(0, np.int64), np.zeros(0))
    reach = int(np.ceil(r / index.cell_size))
    if (2 * reach + 1) ** 3 > 8 * max(index.cell_count, 1):
        qi = np.repeat(np.arange(nq), len(cloud))
        pid = np.tile(np.arange(len(cloud)), nq)
    else:
        qi, pid = _candidates(index, queries, reach)
    dist = _pair_distances(cloud.coords, queries, qi, pid)
    keep = dist <= r
    return _to_neighbor_list(nq, qi[keep], pid[keep], dist[keep])


def radius_query(index: GridIndex, cloud: PointCloud, query, r: float) -> NeighborList:
    return radius_neighbors(index, cloud, np.asarray(query, dtype=np.float64).reshape(1, 3), r)


def knn_neighbors(index: GridIndex, cloud: PointCloud, queries, k: int) -> NeighborList:
    """Batched k-nearest query by growing ball searches until each holds k points."""
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    n = len(cloud)
    if n == 0:
        raise GeometryError("knn query on an empty cloud")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    nq = len(queries)
    k_eff = min(k, n)
    lo, hi = cloud.coords.min(axis=0), cloud.coords.max(axis=0)
    # farthest any query can be from any point
    far = np.linalg.norm(np.maximum(np.abs(queries - lo), np.abs(queries - hi)), axis=1)
    radius = index.cell_size
    pending = np.arange(nq)
    parts = []
    while pending.size:
        r = radius
        if r >= far[pending].max():
            r = float(far[pending].max()) * (1 + 1e-9) + 1e-300
        nl = radius_neighbors(index, cloud, queries[pending], r)
        enough = nl.counts() >= k_eff
        for j in np.flatnonzero(enough):
            parts.append((pending[j], nl.neighbors(j)[:k_eff], nl.dists(j)[:k_eff]))
        pending = pending[~enough]
        radius *= 2.0
    parts.sort(key=lambda t: t[0])
    offsets = np.zeros(nq + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(p[1]) for p in parts])
    indices = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    dists = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    return NeighborList(offsets, indices.astype(np.int64), dists)


def knn_query(index: GridIndex, cloud: PointCloud, query, k: int) -> NeighborList:
    return knn_neighbors(index, cloud, np.asarray(query, dtype=np.float64).reshape(1, 3), k)


def nearest(coarse: np.ndarray, fine: np.ndarray, cell_size: float | None = None) -> np.ndarray:
    """For every fine point, the id of its nearest coarse point (ties -> lowest id)."""
    cloud = PointCloud(coarse)
    if cell_size is None:
        extent = np.ptp(coarse, axis=0).max() if len(coarse) > 1 else 1.0
        cell_size = max(extent / max(len(coarse) ** (1 / 3), 1.0), 1e-9)
    index = build_index(cloud, cell_size)
    nl = knn_neighbors(index, cloud, fine, 1)
    return nl.indices


# -- brute-force oracles ----------------------------------------------------


def brute_radius(coords: np.ndarray, query, r: float) -> tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(((coords - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    ids = np.flatnonzero(d <= r)
    order = np.lexsort((ids, d[ids]))
    return ids[order], d[ids][order]


def brute_knn(coords: np.ndarray, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(((coords - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return order, d[order]
