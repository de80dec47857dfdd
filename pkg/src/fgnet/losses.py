"""Training objectives: kernel deformation losses, multi-stage segmentation
cross-entropy, scene-context presence loss and their total."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .fgconv import KernelSet

REPULSION_EPS = 1e-6


@dataclass
class LossReport:
    l_fit: float = 0.0
    l_rep1: float = 0.0
    l_rep2: float = 0.0
    l_ker: float = 0.0
    l1_seg: float = 0.0
    l2_ctx: float = 0.0
    total: float = 0.0

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[float]:
        return [getattr(self, name) for name in self.header()]

    @classmethod
    def combine(cls, l_fit, l_rep1, l_rep2, l1_seg, l2_ctx) -> LossReport:
        l_ker = l_fit + l_rep1 + l_rep2
        return cls(l_fit, l_rep1, l_rep2, l_ker, l1_seg, l2_ctx, l1_seg + l2_ctx + l_ker)


def kernel_fit_loss(kernel: KernelSet, offsets: np.ndarray | ad.Tensor, neighbors_per_query: int) -> ad.Tensor:
    """Mean over queries of sum_i min_k (|dx_k - (s_i + ds_i)| / (m sigma^2))^2.

    ``offsets`` holds the (Q*K, 3) neighbor offsets, grouped by query in
    blocks of ``neighbors_per_query`` rows. The minimising neighbor is chosen
    on values; the gradient flows through the chosen pair only.
    """
    off = offsets if isinstance(offsets, ad.Tensor) else ad.Tensor(offsets)
    k = neighbors_per_query
    q = off.rows // k
    kp = kernel.positions()
    ns = kernel.size
    d2 = ((off.data[:, None, :] - kp.data[None, :, :]) ** 2).sum(axis=2)  # (Q*K, N_s)
    best = d2.reshape(q, k, ns).argmin(axis=1)  # (Q, N_s)
    rows = (np.arange(q)[:, None] * k + best).reshape(-1)
    cols = np.tile(np.arange(ns), q)
    diff = ad.sub(ad.gather_rows(off, rows), ad.gather_rows(kp, cols))
    total = ad.sum(ad.square(diff))
    return ad.scale(total, 1.0 / (kernel.bandwidth ** 2 * q))


def kernel_repulsive_loss(kernel: KernelSet) -> ad.Tensor:
    """sum_{i != j} 1 / (|p_i - p_j| + eps) over deformed kernel positions."""
    kp = kernel.positions()
    ns = kernel.size
    if ns < 2:
        raise ValueError("repulsive loss needs at least two kernel points")
    ii, jj = np.nonzero(~np.eye(ns, dtype=bool))
    dist = ad.norm_rows(ad.sub(ad.gather_rows(kp, ii), ad.gather_rows(kp, jj)))
    return ad.sum(ad.reciprocal(dist, eps=REPULSION_EPS))


def kernel_contain_loss(kernel: KernelSet) -> ad.Tensor:
    """sum_i |s_i + ds_i|^2."""
    return ad.sum(ad.square(kernel.positions()))


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ValueError(f"label {bad} outside [0, {classes - 1}]")
    return labels


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean over points of -log softmax(logits)[label]."""
    labels = _check_labels(labels, logits.cols)
    n = logits.rows
    logp = ad.log_softmax(logits)
    picked = ad.gather_rows(ad.reshape(logp, n * logits.cols, 1), np.arange(n) * logits.cols + labels)
    return ad.scale(ad.sum(picked), -1.0 / n)


def seg_loss(stage_logits: list[ad.Tensor], fused_logits: ad.Tensor, labels: np.ndarray,
             alpha, beta: float) -> ad.Tensor:
    """sum_h alpha_h CE(stage h) + beta CE(fused), each averaged over points."""
    if len(alpha) != len(stage_logits):
        raise ValueError(f"{len(alpha)} stage weights for {len(stage_logits)} stages")
    total = ad.scale(cross_entropy(fused_logits, labels), beta)
    for a, logits in zip(alpha, stage_logits):
        total = ad.add(total, ad.scale(cross_entropy(logits, labels), a))
    return total


def presence_targets(labels: np.ndarray, classes: int) -> np.ndarray:
    target = np.zeros((1, classes))
    target[0, np.unique(_check_labels(labels, classes))] = 1.0
    return target


def context_loss(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy with sigmoid activation over classes.

    BCE(x, y) = y softplus(-x) + (1 - y) softplus(x).
    """
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    pos = ad.mul(ad.softplus(ad.scale(logits, -1.0)), ad.Tensor(y))
    neg = ad.mul(ad.softplus(logits), ad.Tensor(1.0 - y))
    return ad.mean(ad.add(pos, neg))
