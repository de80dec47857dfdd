"""Point sampling: random, farthest-point, inverse-density, Gumbel-softmax.

``build_plan`` chains per-stage selections into a :class:`SamplingPlan`,
the fine-to-coarse structure the network encoder and decoder walk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import autodiff as ad
from .geometry import NeighborList, PointCloud, build_index, nearest, radius_neighbors

GSS_MAX_POINTS = 100_000
MAX_REDRAWS = 32
TAU_START = 1.0
TAU_END = 0.05


class SamplingError(ValueError):
    pass


def _check_count(n: int, count: int, minimum: int = 0) -> None:
    if count > n:
        raise SamplingError(f"cannot sample {count} points from {n}")
    if count < minimum:
        raise SamplingError(f"count must be >= {minimum}, got {count}")


def random_sample(n: int, count: int, seed: int) -> np.ndarray:
    """``count`` distinct ids drawn uniformly without replacement, sorted."""
    _check_count(n, count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)


@numba.njit(cache=True)
def _fps_kernel(coords, count, start):
    n = coords.shape[0]
    out = np.empty(count, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for s in range(count):
        out[s] = cur
        cx, cy, cz = coords[cur, 0], coords[cur, 1], coords[cur, 2]
        best = -1.0
        nxt = 0
        for j in range(n):
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                nxt = j
        cur = nxt
    return out


def farthest_point_sample(coords: np.ndarray, count: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min selection in pick order; ties go to the lowest id."""
    coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3)
    n = len(coords)
    _check_count(n, count, minimum=1)
    if not 0 <= start_index < n:
        raise SamplingError(f"start_index {start_index} outside [0, {n})")
    return _fps_kernel(coords, count, start_index)


def inverse_density_weights(neighbor_counts: np.ndarray) -> np.ndarray:
    """w_i = 1 / (N^r_i + 1) with N^r the self-excluded ball count."""
    return 1.0 / (np.asarray(neighbor_counts, dtype=np.float64) + 1.0)


def inverse_density_sample(neighbors, count: int, seed: int) -> np.ndarray:
    """Successive weighted draws without replacement, weights 1/(N^r+1); sorted ids.

    ``neighbors`` is either a self-inclusive :class:`NeighborList` over the
    cloud or an array of self-excluded counts N^r.
    """
    if isinstance(neighbors, NeighborList):
        neighbors = neighbors.counts() - 1
    w = inverse_density_weights(neighbors)
    n = len(w)
    _check_count(n, count)
    if count == n:
        return np.arange(n, dtype=np.int64)
    # Gumbel top-k on log-weights is equivalent to successive weighted draws.
    rng = np.random.default_rng(seed)
    keys = np.log(w) + rng.gumbel(size=n)
    top = np.argpartition(-keys, count - 1)[:count] if count else np.zeros(0, np.int64)
    return np.sort(top).astype(np.int64)


def density_counts(coords: np.ndarray, radius: float) -> np.ndarray:
    cloud = PointCloud(coords)
    index = build_index(cloud, radius)
    return radius_neighbors(index, cloud, cloud.coords, radius).counts() - 1


# -- Gumbel-softmax sampling --------------------------------------------------


def anneal_tau(step: int, total: int, start: float = TAU_START, end: float = TAU_END) -> float:
    """Exponential decay from ``start`` (step 0) to ``end`` (step total-1)."""
    if total <= 1:
        return start
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return float(start * (end / start) ** frac)


@dataclass
class GumbelSampler:
    weights: ad.Tensor  # (N_sel, 3 + f) selection weights
    tau: float = TAU_START
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise SamplingError(f"tau must be positive, got {self.tau}")

    @classmethod
    def init(cls, n_select: int, width: int, seed: int = 0, tau: float = TAU_START) -> GumbelSampler:
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=1.0 / np.sqrt(max(width, 1)), size=(n_select, width))
        return cls(ad.parameter(w, name="gss.weights"), tau, seed)

    @property
    def n_select(self) -> int:
        return self.weights.rows

    def noise(self, n: int, rows: int | None = None) -> np.ndarray:
        rows = self.n_select if rows is None else rows
        return np.random.default_rng([self.seed, 0]).gumbel(size=(rows, n))

    def redraw(self, row: int, attempt: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 1, row, attempt]).gumbel(size=n)


def _as_points(points) -> ad.Tensor:
    if isinstance(points, PointCloud):
        return ad.Tensor(np.concatenate([points.coords, points.features], axis=1))
    return points if isinstance(points, ad.Tensor) else ad.Tensor(points)


def _check_cap(n: int) -> None:
    if n > GSS_MAX_POINTS:
        raise SamplingError(
            f"Gumbel-softmax sampling is capped at {GSS_MAX_POINTS} points (got {n}); "
            "use inverse-density sampling at this stage"
        )


def selection_log_scores(weights: ad.Tensor, points: ad.Tensor) -> ad.Tensor:
    """log s where s = softmax over points of W P^T, one row per selection."""
    return ad.log_softmax(ad.matmul(weights, ad.transpose(points)))


def gumbel_soft_select(sampler: GumbelSampler, points, noise: np.ndarray | None = None):
    """Relaxed selection: rows softmax((log s + g) / tau) and the mixed points."""
    p = _as_points(points)
    _check_cap(p.rows)
    if noise is None:
        noise = sampler.noise(p.rows)
    logits = ad.scale(ad.add(selection_log_scores(sampler.weights, p), ad.Tensor(noise)), 1.0 / sampler.tau)
    soft = ad.softmax(logits, axis=1)
    return soft, ad.matmul(soft, p)


def gumbel_max_rows(sampler: GumbelSampler, points, noise: np.ndarray | None = None) -> np.ndarray:
    """Plain per-row argmax of log s + g (repeats allowed); the tau -> 0 limit of the soft rows."""
    p = _as_points(points)
    _check_cap(p.rows)
    if noise is None:
        noise = sampler.noise(p.rows)
    log_s = selection_log_scores(ad.Tensor(sampler.weights.data), ad.Tensor(p.data)).data
    return np.argmax(log_s + noise, axis=1)


def gumbel_hard_select(sampler: GumbelSampler, points, noise: np.ndarray | None = None) -> np.ndarray:
    """Per-row argmax of log s + g, in row order, without repeats.

    A row whose winner is already taken redraws its noise (up to 32 times),
    then falls back to its best-scoring unused point.
    """
    p = _as_points(points)
    n = p.rows
    _check_cap(n)
    if sampler.n_select > n:
        raise SamplingError(f"cannot select {sampler.n_select} points from {n}")
    if noise is None:
        noise = sampler.noise(n)
    log_s = selection_log_scores(ad.Tensor(sampler.weights.data), ad.Tensor(p.data)).data
    used = np.zeros(n, dtype=bool)
    out = np.empty(sampler.n_select, dtype=np.int64)
    for row in range(sampler.n_select):
        score = log_s[row] + noise[row]
        pick = int(np.argmax(score))
        attempt = 0
        while used[pick] and attempt < MAX_REDRAWS:
            score = log_s[row] + sampler.redraw(row, attempt, n)
            pick = int(np.argmax(score))
            attempt += 1
        if used[pick]:
            masked = np.where(used, -np.inf, score)
            pick = int(np.argmax(masked))
        used[pick] = True
        out[row] = pick
    return out


def straight_through(soft: ad.Tensor, hard_indices: np.ndarray) -> ad.Tensor:
    """One-hot forward value, soft-selection gradient."""
    onehot = np.zeros(soft.shape)
    onehot[np.arange(len(hard_indices)), hard_indices] = 1.0
    return ad.add(soft, ad.Tensor(onehot - soft.data))


# -- plans --------------------------------------------------------------------

MODES = ("igsam", "fps", "rs", "ids", "gss")


@dataclass
class StagePlan:
    indices: np.ndarray  # into the previous stage's cloud
    upsample: np.ndarray  # previous-stage point -> nearest point of this stage
    method: str


@dataclass
class SamplingPlan:
    num_points: int
    stages: list[StagePlan] = field(default_factory=list)

    @property
    def counts(self) -> list[int]:
        return [len(s.indices) for s in self.stages]

    def global_indices(self, stage: int) -> np.ndarray:
        """Ids into the original cloud of the points kept at ``stage``."""
        idx = np.arange(self.num_points)
        for s in self.stages[: stage + 1]:
            idx = idx[s.indices]
        return idx

    def upsample_to_full(self, stage: int) -> np.ndarray:
        """For every original point, its representative at ``stage``."""
        m = np.arange(self.num_points)
        for s in self.stages[: stage + 1]:
            m = s.upsample[m]
        return m


def default_schedule(n: int, stages: int = 5, ratio: int = 5) -> list[int]:
    """N/ratio, N/ratio^2, ... rounded up; the last stage keeps at least one point."""
    counts = []
    cur = n
    for _ in range(stages):
        cur = max(-(-cur // ratio), 1)
        counts.append(cur)
    return counts


def _check_schedule(n: int, schedule) -> list[int]:
    sched = [int(c) for c in schedule]
    if not sched:
        raise SamplingError("empty schedule")
    if sched[0] > n:
        raise SamplingError(f"first stage count {sched[0]} exceeds {n} points")
    for a, b in zip(sched, sched[1:]):
        if b >= a:
            raise SamplingError(f"schedule must strictly decrease, got {sched}")
    if sched[-1] < 1:
        raise SamplingError("every stage needs at least one point")
    return sched


def default_radius(coords: np.ndarray) -> float:
    ext = np.ptp(coords, axis=0) if len(coords) > 1 else np.ones(3)
    area = max(np.sort(ext)[1:].prod(), 1e-12)
    return float(2.0 * np.sqrt(area / max(len(coords), 1)))


def _select(method: str, coords: np.ndarray, features: np.ndarray, count: int, seed: int,
            radius: float, sampler: GumbelSampler | None) -> np.ndarray:
    n = len(coords)
    if method == "rs":
        return random_sample(n, count, seed)
    if method == "fps":
        return np.sort(farthest_point_sample(coords, count, 0))
    if method == "ids":
        return inverse_density_sample(density_counts(coords, radius), count, seed)
    if method == "gss":
        if sampler is None:
            sampler = GumbelSampler.init(count, 3 + features.shape[1], seed)
        if sampler.n_select != count:
            raise SamplingError(f"sampler selects {sampler.n_select} points, stage needs {count}")
        return gumbel_hard_select(sampler, np.concatenate([coords, features], axis=1))
    raise SamplingError(f"unknown sampling method {method!r}")


def extend_plan(plan: SamplingPlan, cloud: PointCloud, count: int, method: str, seed: int,
                radius: float | None = None, sampler: GumbelSampler | None = None) -> SamplingPlan:
    """Append one stage selected from the current coarsest stage."""
    sel = plan.global_indices(len(plan.stages) - 1) if plan.stages else np.arange(len(cloud))
    coords = cloud.coords[sel]
    _check_schedule(len(coords), [count])
    if plan.stages and count >= len(coords):
        raise SamplingError(f"schedule must strictly decrease, got {len(coords)} -> {count}")
    r = radius if radius is not None else default_radius(coords)
    idx = _select(method, coords, cloud.features[sel], count, seed, r, sampler)
    up = nearest(coords[idx], coords)
    plan.stages.append(StagePlan(idx, up, method))
    return plan


def build_plan(cloud: PointCloud, schedule, mode: str = "igsam", seed: int = 0,
               radii=None, sampler: GumbelSampler | None = None) -> SamplingPlan:
    """Per-stage fine-to-coarse selections plus nearest-point upsample maps.

    ``igsam`` uses inverse-density sampling for every stage but the last,
    which uses Gumbel-softmax selection.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise SamplingError(f"unknown mode {mode!r}; expected one of {MODES}")
    sched = _check_schedule(len(cloud), schedule)
    plan = SamplingPlan(len(cloud))
    for s, count in enumerate(sched):
        if mode == "igsam":
            method = "gss" if s == len(sched) - 1 else "ids"
        else:
            method = mode
        r = None if radii is None else radii[s]
        stage_seed = int(np.random.default_rng([seed, s]).integers(2**31))
        if s == 0 and count == len(cloud):
            plan.stages.append(StagePlan(np.arange(count), np.arange(count), method))
            continue
        extend_plan(plan, cloud, count, method, stage_seed, r,
                    sampler if method == "gss" else None)
    return plan
