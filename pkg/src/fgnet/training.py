"""Adam, augmentation, the prefetching training loop and the gradient checker."""

from __future__ import annotations

import csv
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .filtering import FilterParams, filter_cloud
from .geometry import PointCloud
from .losses import LossReport
from .network import Batch, FGNet, NetworkConfig, prepare_stages
from .sampling import anneal_tau, random_sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class Diverged(TrainingError):
    pass


def thread_cap() -> int:
    """Worker cap from FGNET_THREADS (default: unbounded -> 2 roles)."""
    raw = os.environ.get("FGNET_THREADS", "")
    try:
        return max(int(raw), 1) if raw else 2
    except ValueError:
        raise TrainingError(f"FGNET_THREADS must be an integer, got {raw!r}") from None


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_points: int = 8192
    seed: int = 0
    tau_start: float = 1.0
    tau_end: float = 0.05
    augment: bool = True
    rotate: bool = True
    scale: bool = True
    filter_radius: float = 0.0  # 0 disables filtering
    filter_min_neighbors: int = 4
    filter_sigma: float = 2.0
    checkpoint_every: int = 25

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# -- optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[name].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None or m.shape != g.shape:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


# -- augmentation ----------------------------------------------------------------


def rotation_matrix(angles) -> np.ndarray:
    """Rotate about x, then y, then z."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(cloud: PointCloud, seed: int, rotate: bool = True, scale: bool = True,
            angles=None, scales=None) -> PointCloud:
    """Random rotation about each axis (angles in [0, 2pi)) then per-axis scaling in [0.85, 1.15].

    ``angles`` / ``scales`` override the random draw.
    """
    rng = np.random.default_rng(seed)
    draw_angles = rng.uniform(0.0, 2 * np.pi, size=3)
    draw_scales = rng.uniform(0.85, 1.15, size=3)
    if angles is None:
        angles = draw_angles if rotate else np.zeros(3)
    if scales is None:
        scales = draw_scales if scale else np.ones(3)
    coords = cloud.coords
    if np.any(np.asarray(angles) != 0):
        coords = coords @ rotation_matrix(angles).T
    if np.any(np.asarray(scales) != 1):
        coords = coords * np.asarray(scales, dtype=np.float64)
    return PointCloud(coords.copy(), cloud.features.copy(), None if cloud.labels is None else cloud.labels.copy(),
                      cloud.num_classes)


# -- loop ---------------------------------------------------------------------------


def batch_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([seed, epoch, index]).integers(2**31))


def make_batch(net: FGNet, cloud: PointCloud, cfg: TrainConfig, seed: int, partial: bool) -> Batch:
    """Crop, augment, filter, plan and precompute stage neighbor tables."""
    if len(cloud) > cfg.batch_points:
        cloud = cloud.subset(random_sample(len(cloud), cfg.batch_points, seed))
    if cfg.augment:
        cloud = augment(cloud, seed, cfg.rotate, cfg.scale)
    if cfg.filter_radius > 0:
        cloud, _ = filter_cloud(cloud, FilterParams(cfg.filter_radius, cfg.filter_min_neighbors, cfg.filter_sigma))
    plan = net.plan(cloud, seed, partial=partial)
    stages = prepare_stages(cloud, plan, net.config, upto=len(plan.stages) + 1)
    return Batch(cloud, plan, stages)


def complete_batch(net: FGNet, batch: Batch, seed: int) -> Batch:
    if len(batch.plan.stages) < net.config.stages - 1:
        net.finish_plan(batch.plan, batch.cloud, seed)
    if len(batch.stages) < net.config.stages:
        batch.stages = prepare_stages(batch.cloud, batch.plan, net.config)
    return batch


class Prefetcher:
    """Prepares batch n+1 on a loader thread while the trainer consumes batch n.

    Hand-off goes through a queue of depth 1. Everything the loader touches is
    parameter-independent, so results do not depend on thread timing.
    """

    _DONE = object()

    def __init__(self, jobs, build, threaded: bool = True):
        self._jobs = list(jobs)
        self._build = build
        self._threaded = threaded
        self._queue: queue.Queue = queue.Queue(maxsize=1)
        self._stop = threading.Event()
        self._thread = None

    def _run(self):
        try:
            for job in self._jobs:
                if self._stop.is_set():
                    return
                self._queue.put((job, self._build(job), None))
        except Exception as exc:  # surfaced on the trainer side
            self._queue.put((None, None, exc))
        self._queue.put(self._DONE)

    def __iter__(self):
        if not self._threaded:
            for job in self._jobs:
                yield job, self._build(job)
            return
        self._thread = threading.Thread(target=self._run, name="fgnet-loader", daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    break
                job, value, exc = item
                if exc is not None:
                    raise exc
                yield job, value
        finally:
            self._stop.set()
            while self._thread.is_alive():
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    self._thread.join(timeout=0.01)


@dataclass
class TrainResult:
    net: FGNet
    history: list[LossReport]
    checkpoint: Path
    csv_path: Path


def _write_csv_row(path: Path, epoch: int, report: LossReport) -> None:
    with path.open("a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow([epoch] + [repr(float(v)) for v in report.values()])


def train(dataset: list[PointCloud], net_config: NetworkConfig, config: TrainConfig, out_dir,
          net: FGNet | None = None, on_epoch=None) -> TrainResult:
    if not dataset:
        raise TrainingError("dataset is empty")
    for i, c in enumerate(dataset):
        if c.labels is None:
            raise TrainingError(f"scene {i} has no labels")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = net or FGNet(net_config)
    ckpt = out / "checkpoint.fgn"
    csv_path = out / "losses.csv"
    with csv_path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(["epoch"] + LossReport.header())
    checkpoint.save(net, ckpt, 0)

    state = AdamState()
    history: list[LossReport] = []
    jobs = [(e, i) for e in range(config.epochs) for i in range(len(dataset))]
    threaded = thread_cap() > 1

    def build(job):
        e, i = job
        return make_batch(net, dataset[i], config, batch_seed(config.seed, e, i), partial=True)

    epoch_reports: list[LossReport] = []
    for (epoch, i), batch in Prefetcher(jobs, build, threaded):
        seed = batch_seed(config.seed, epoch, i)
        complete_batch(net, batch, seed)
        if net.sampler is not None:
            net.sampler.tau = anneal_tau(epoch, config.epochs, config.tau_start, config.tau_end)
        params = net.named_parameters()
        for p in params.values():
            p.zero_grad()
        total, report, _ = net.loss(batch)
        if not np.isfinite(report.total):
            checkpoint.save(net, ckpt, epoch)
            raise Diverged(f"total loss became non-finite at epoch {epoch}; last good parameters saved to {ckpt}")
        total.backward()
        adam_step(params, {k: p.grad for k, p in params.items()}, state, config)
        epoch_reports.append(report)
        if i == len(dataset) - 1:
            agg = _mean_report(epoch_reports)
            epoch_reports = []
            history.append(agg)
            _write_csv_row(csv_path, epoch + 1, agg)
            if on_epoch is not None:
                on_epoch(epoch + 1, agg, net)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                checkpoint.save(net, ckpt, epoch + 1)
    checkpoint.save(net, ckpt, config.epochs)
    return TrainResult(net, history, ckpt, csv_path)


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    avg = [sum(getattr(r, k) for r in reports) / n for k in ("l_fit", "l_rep1", "l_rep2", "l1_seg", "l2_ctx")]
    return LossReport.combine(*avg)


def training_accuracy(net: FGNet, cloud: PointCloud, seed: int = 0) -> float:
    batch = net.prepare(cloud, seed)
    pred = net.predict(batch)
    return float((pred == cloud.labels).mean())


# -- gradient check ---------------------------------------------------------------


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    threshold: float

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold

    def to_text(self) -> str:
        lines = [f"{name}\t{err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max\t{self.worst:.3e}\t{'PASS' if self.passed else 'FAIL'} (threshold {self.threshold:g})")
        return "\n".join(lines) + "\n"


def gradcheck_network(net: FGNet, batch: Batch, step: float = 1e-5, threshold: float = 1e-3,
                      include_coords: bool = True) -> GradcheckReport:
    """Central differences of the total loss vs backprop for every parameter tensor
    and for the input coordinates."""
    coords = ad.parameter(batch.cloud.coords.copy(), "coords")
    params = net.named_parameters()
    for p in params.values():
        p.zero_grad()
    total, _, _ = net.loss(batch, coords)
    total.backward()

    def value() -> float:
        return net.loss(batch, ad.Tensor(coords.data))[0].item()

    errors = {}
    targets = dict(params)
    if include_coords:
        targets["input.coords"] = coords
    for name, p in targets.items():
        analytic = p.grad.copy()
        numeric = ad.numerical_gradient(value, p, step)
        errors[name] = ad.relative_error(analytic, numeric)
    return GradcheckReport(errors, threshold)


def gradcheck_instance(seed: int = 0, points: int = 32, num_classes: int = 3, **overrides) -> tuple[FGNet, Batch]:
    """A tiny 2-stage network and labelled cloud for end-to-end checks."""
    rng = np.random.default_rng(seed)
    # metre-scale radii keep the kernel losses O(10), so finite-difference
    # roundoff stays well below the 1e-3 threshold
    coords = rng.uniform(0, 10.0, size=(points, 3))
    feats = rng.uniform(0, 1, size=(points, 3))
    labels = rng.integers(0, num_classes, size=points)
    cloud = PointCloud(coords, feats, labels, num_classes)
    cfg = dict(stages=2, bottleneck=2, widths=[4, 6], radii=[5.0, 10.0], neighbors=4,
               num_classes=num_classes, in_features=3, alpha=[1.0, 0.5], beta=1.0,
               blocks_per_stage=1, gss_transfer="soft", seed=seed)
    cfg.update(overrides)
    net = FGNet(NetworkConfig(**cfg))
    _perturb(net, seed)
    batch = net.prepare(cloud, seed)
    return net, batch


def _perturb(net: FGNet, seed: int) -> None:
    """Move zero-initialised tensors off zero so every path carries gradient."""
    rng = np.random.default_rng(seed + 1)
    for name, p in net.all_tensors().items():
        if name.endswith(".b") or name.endswith("kernel.deform"):
            p.data += rng.normal(scale=0.02, size=p.data.shape)


def _op_cases(rng: np.random.Generator):
    """(name, inputs, fn) for every differentiable op; fn maps inputs to a tensor."""

    def away(shape):  # values bounded away from relu's kink
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    row, col = rng.normal(size=(1, 3)), rng.normal(size=(4, 1))
    pos = rng.uniform(0.5, 2.0, size=(4, 3))
    idx = np.array([2, 0, 2, 3, 1])
    return [
        ("add", [a, row], lambda x, y: ad.add(x, y)),
        ("sub", [a, col], lambda x, y: ad.sub(x, y)),
        ("mul", [a, b], lambda x, y: ad.mul(x, y)),
        ("mul_broadcast", [a, row], lambda x, y: ad.mul(x, y)),
        ("scale", [a], lambda x: ad.scale(x, -1.7)),
        ("square", [a], ad.square),
        ("exp", [a], ad.exp),
        ("log", [pos], ad.log),
        ("reciprocal", [pos], ad.reciprocal),
        ("relu", [away((4, 3))], ad.relu),
        ("softplus", [a], ad.softplus),
        ("matmul", [a, rng.normal(size=(3, 5))], ad.matmul),
        ("transpose", [a], ad.transpose),
        ("reshape", [a], lambda x: ad.reshape(x, 2, 6)),
        ("sum_all", [a], lambda x: ad.sum(x)),
        ("sum_rows", [a], lambda x: ad.sum(x, 0)),
        ("sum_cols", [a], lambda x: ad.sum(x, 1)),
        ("mean", [a], lambda x: ad.mean(x, 1)),
        ("norm_rows", [a], ad.norm_rows),
        ("concat_cols", [a, b], lambda x, y: ad.concat([x, y], 1)),
        ("concat_rows", [a, row], lambda x, y: ad.concat([x, y], 0)),
        ("gather_rows", [a], lambda x: ad.gather_rows(x, idx)),
        ("scatter_add_rows", [rng.normal(size=(5, 3))], lambda x: ad.scatter_add_rows(x, idx, 4)),
        ("segment_sum", [rng.normal(size=(6, 3))], lambda x: ad.segment_sum(x, 3)),
        ("softmax_rows", [a], lambda x: ad.softmax(x, 1)),
        ("softmax_cols", [a], lambda x: ad.softmax(x, 0)),
        ("full_matrix_softmax", [a], ad.full_matrix_softmax),
        ("log_softmax", [a], ad.log_softmax),
    ]


def gradcheck_ops(seed: int = 0, step: float = 1e-5, threshold: float = 1e-4) -> GradcheckReport:
    """Per-op check: each op output is contracted with fixed random weights."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arrays, fn in _op_cases(rng):
        inputs = [ad.parameter(x.copy()) for x in arrays]
        shape = fn(*[ad.Tensor(x.data) for x in inputs]).shape
        weights = ad.Tensor(rng.normal(size=shape))

        def value(fn=fn, inputs=inputs, weights=weights):
            return ad.sum(ad.mul(fn(*[ad.Tensor(x.data) for x in inputs]), weights)).item()

        ad.sum(ad.mul(fn(*inputs), weights)).backward()
        worst = 0.0
        for x in inputs:
            worst = max(worst, ad.relative_error(x.grad, ad.numerical_gradient(value, x, step)))
        errors[name] = worst
    return GradcheckReport(errors, threshold)
