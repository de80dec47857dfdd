"""Radius + Gaussian outlier filtering.

Two passes over a read-only cloud:

1. isolation: a point whose ball of radius ``r`` holds at most
   ``min_neighbors`` other points is removed;
2. statistics: over the survivors, each point's mean distance to its
   (self-excluded) ball neighbors is modelled as Gaussian; points whose mean
   falls outside ``mu +/- sigma_multiplier * sigma`` are removed in one batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import NeighborList, PointCloud, build_index, radius_neighbors


@dataclass(frozen=True)
class FilterParams:
    radius: float
    min_neighbors: int = 4
    sigma_multiplier: float = 2.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.min_neighbors < 1:
            raise ValueError(f"min_neighbors must be >= 1, got {self.min_neighbors}")
        if not self.sigma_multiplier > 0:
            raise ValueError(f"sigma_multiplier must be positive, got {self.sigma_multiplier}")


@dataclass
class FilterReport:
    removed_isolated: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    removed_statistical: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    mu: float = 0.0
    sigma: float = 0.0
    elapsed: float = 0.0
    neighbor_counts: np.ndarray | None = None  # self-excluded N^r per input point

    def summary(self) -> str:
        return (
            f"removed_isolated={len(self.removed_isolated)} "
            f"removed_statistical={len(self.removed_statistical)} "
            f"mu={self.mu:.9g} sigma={self.sigma:.9g} elapsed={self.elapsed:.4f}s"
        )


def neighbor_stats(neighbors: NeighborList) -> tuple[np.ndarray, np.ndarray]:
    """Self-excluded neighbor count and mean neighbor distance per query.

    The query itself is always at distance 0 in its own slice; exactly one
    entry per query is discounted. Points with no other neighbor get a
    mean distance of 0.
    """
    counts = neighbors.counts() - 1
    q = np.repeat(np.arange(neighbors.query_count), neighbors.counts())
    sums = np.bincount(q, weights=neighbors.distances, minlength=neighbors.query_count)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return counts, means


def filter_cloud(cloud: PointCloud, params: FilterParams) -> tuple[PointCloud, FilterReport]:
    start = time.perf_counter()
    n = len(cloud)
    if n == 0:
        return cloud.subset(np.zeros(0, np.int64)), FilterReport(neighbor_counts=np.zeros(0, np.int64))
    index = build_index(cloud, params.radius)
    neighbors = radius_neighbors(index, cloud, cloud.coords, params.radius)
    counts, means = neighbor_stats(neighbors)

    isolated = counts <= params.min_neighbors
    survivors = ~isolated
    mu = sigma = 0.0
    statistical = np.zeros(n, dtype=bool)
    if survivors.any():
        vals = means[survivors]
        mu = float(vals.mean())
        sigma = float(np.sqrt(((vals - mu) ** 2).mean()))
        lo, hi = mu - params.sigma_multiplier * sigma, mu + params.sigma_multiplier * sigma
        statistical = survivors & ((means < lo) | (means > hi))

    keep = ~(isolated | statistical)
    report = FilterReport(
        removed_isolated=np.flatnonzero(isolated),
        removed_statistical=np.flatnonzero(statistical),
        mu=mu,
        sigma=sigma,
        elapsed=time.perf_counter() - start,
        neighbor_counts=counts,
    )
    return cloud.subset(np.flatnonzero(keep)), report
