"""FG-Conv: correlated-feature mining, deformable kernel-point convolution
and attentional aggregation over fixed-size radius neighborhoods.

Per query point i with K neighbors P_k = (x_k, f_k):

* PFM  - cosine similarities g_k between p_k and p_i, reweighted by a
  learnable K x K attention and softmax; the rows of P_k are scaled by the
  result and concatenated with P_k.
* GCM  - Gaussian correlation of each neighbor offset with every deformed
  kernel point, summed and applied to (dx_k, f_k) W_ker.
* AG   - channel attention from the K-weighted sum of the concatenated
  branches, residual summation and a final projection.

The single-point functions (``pfm``, ``kernel_correlation``, ``gcm``,
``ag``) are reference versions; ``fg_conv_forward`` is the batched path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

NUM_KERNEL_POINTS = 15
SIGMA_RATIO = 2.5
DEFAULT_K = 16


def kernel_dispositions(n_points: int = NUM_KERNEL_POINTS, radius: float = 1.0, seed: int = 0,
                        iterations: int = 400) -> np.ndarray:
    """One point at the origin plus ``n_points - 1`` spread by repulsion inside the ball.

    Projected gradient descent on sum 1/d_ij + 0.5 * sum |x_i|^2 in the unit
    ball, then scaled by ``radius``.
    """
    if n_points == 1:
        return np.zeros((1, 3))
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n_points - 1, 3))
    pts *= (0.6 / np.linalg.norm(pts, axis=1, keepdims=True))
    lr = 0.01
    for _ in range(iterations):
        allp = np.vstack([np.zeros((1, 3)), pts])
        diff = pts[:, None, :] - allp[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        dist[np.arange(n_points - 1), np.arange(1, n_points)] = np.inf
        force = (diff / dist[..., None] ** 3).sum(axis=1)
        grad = -force + pts
        step = np.clip(lr * grad, -0.05, 0.05)
        pts = pts - step
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = np.where(norms > 1.0, pts / norms, pts)
    return np.vstack([np.zeros((1, 3)), pts]) * radius


@dataclass
class KernelSet:
    base: np.ndarray  # (N_s, 3), fixed
    deform: ad.Tensor  # (N_s, 3), learnable
    sigma: float
    m: float
    radius: float
    frozen: bool = False

    @classmethod
    def create(cls, radius: float, n_points: int = NUM_KERNEL_POINTS, seed: int = 0,
               frozen: bool = False, m: float = 1.0) -> KernelSet:
        base = kernel_dispositions(n_points, radius, seed)
        return cls(base, ad.parameter(np.zeros_like(base), name="kernel.deform"),
                   radius / SIGMA_RATIO, m, radius, frozen)

    @property
    def size(self) -> int:
        return len(self.base)

    @property
    def bandwidth(self) -> float:
        """m * sigma^2, the Gaussian denominator."""
        return self.m * self.sigma ** 2

    def positions(self) -> ad.Tensor:
        """Deformed kernel positions s_i + ds_i (deformation ignored when frozen)."""
        if self.frozen:
            return ad.Tensor(self.base)
        return ad.add(ad.Tensor(self.base), self.deform)


# -- single-point reference operations -------------------------------------


def cosine_similarities(p_i: ad.Tensor, p_k: ad.Tensor) -> ad.Tensor:
    """(K, 1) cosine similarity of each neighbor row with the query row; 0 for zero norms."""
    dots = ad.matmul(p_k, ad.transpose(p_i))
    norms = ad.mul(ad.norm_rows(p_k), ad.norm_rows(p_i))
    return ad.mul(dots, ad.reciprocal(norms, eps=ad.EPS))


def pfm(p_i: ad.Tensor, p_k: ad.Tensor, w1: ad.Tensor) -> ad.Tensor:
    """Pointwise correlated feature mining for one query -> (K, 2(3+f))."""
    g = cosine_similarities(p_i, p_k)  # (K, 1)
    z = ad.softmax(ad.matmul(ad.transpose(g), ad.transpose(w1)), axis=1)  # (1, K) = softmax(w1 r)
    augmented = ad.mul(p_k, ad.transpose(z))
    return ad.concat([augmented, p_k])


def kernel_correlation(kernel: KernelSet, offset) -> ad.Tensor:
    """(1, N_s) Gaussian correlations of one neighbor offset with each kernel point."""
    dx = offset if isinstance(offset, ad.Tensor) else ad.Tensor(np.asarray(offset, float).reshape(1, 3))
    diff = ad.sub(kernel.positions(), dx)
    sq = ad.transpose(ad.sum(ad.square(diff), axis=1))
    return ad.scale(ad.exp(ad.scale(sq, -1.0 / kernel.bandwidth)), 1.0 / kernel.size)


def gcm(x_i: ad.Tensor, x_k: ad.Tensor, f_k: ad.Tensor, kernel: KernelSet, w_ker: ad.Tensor) -> ad.Tensor:
    """Geometric convolution for one query -> (K, f_mid).

    Row k is (sum_i C_i(dx_k)) * [dx_k, f_k] W_ker with dx_k = x_k - x_i.
    """
    rows = []
    for k in range(x_k.rows):
        dx = ad.sub(ad.gather_rows(x_k, [k]), x_i)
        weight = ad.sum(kernel_correlation(kernel, dx))
        local = ad.concat([dx, ad.gather_rows(f_k, [k])])
        rows.append(ad.mul(ad.matmul(local, w_ker), weight))
    return ad.concat(rows, axis=0)


def ag(f1: ad.Tensor, f2: ad.Tensor | None, w2: ad.Tensor, projection: ad.Tensor,
       attention: bool = True) -> ad.Tensor:
    """Attentional aggregation for one query -> (1, f_out).

    ``w2`` is a (K, 1) column; its contraction with the (K, f_int) block gives
    per-channel logits, softmaxed over channels.
    """
    parts = [t for t in (f1, f2) if t is not None]
    fi = ad.concat(parts) if len(parts) > 1 else parts[0]
    fh = ad.sum(fi, axis=0)
    if attention:
        fa = ad.softmax(ad.matmul(ad.transpose(w2), fi), axis=1)
        fb = ad.add(fh, ad.mul(fa, fh))
    else:
        fb = fh
    return ad.matmul(fb, projection)


# -- layer -------------------------------------------------------------------


@dataclass
class FgConvLayer:
    kernel: KernelSet
    w_ker: ad.Tensor  # (3 + f_in, f_mid)
    w1: ad.Tensor  # (K, K)
    w2: ad.Tensor  # (K, 1)
    projection: ad.Tensor  # (f_int, f_out)
    k: int = DEFAULT_K
    use_pfm: bool = True
    use_gcm: bool = True
    use_ag: bool = True

    @classmethod
    def create(cls, f_in: int, f_out: int, radius: float, rng: np.random.Generator,
               k: int = DEFAULT_K, use_pfm: bool = True, use_gcm: bool = True, use_ag: bool = True,
               frozen_kernel: bool = False, kernel_seed: int = 0) -> FgConvLayer:
        if not (use_pfm or use_gcm):
            raise ValueError("FG-Conv needs at least one of the PFM and GCM branches")
        c = 3 + f_in
        f_mid = 6 + 2 * f_in
        f_int = f_mid * (int(use_pfm) + int(use_gcm))
        kernel = KernelSet.create(radius, seed=kernel_seed, frozen=frozen_kernel)
        w_ker = rng.normal(scale=np.sqrt(1.0 / c), size=(c, f_mid))
        w1 = np.eye(k) + rng.normal(scale=0.1, size=(k, k))
        w2 = rng.normal(scale=0.1, size=(k, 1))
        proj = rng.normal(scale=np.sqrt(1.0 / (f_int * k)), size=(f_int, f_out))
        return cls(kernel, ad.parameter(w_ker, "w_ker"), ad.parameter(w1, "w1"),
                   ad.parameter(w2, "w2"), ad.parameter(proj, "projection"),
                   k, use_pfm, use_gcm, use_ag)

    @property
    def f_in(self) -> int:
        return self.w_ker.rows - 3

    @property
    def f_mid(self) -> int:
        return 6 + 2 * self.f_in

    @property
    def f_out(self) -> int:
        return self.projection.cols

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {"projection": self.projection}
        if self.use_gcm:
            params["w_ker"] = self.w_ker
            if not self.kernel.frozen:
                params["kernel.deform"] = self.kernel.deform
        if self.use_pfm:
            params["w1"] = self.w1
        if self.use_ag:
            params["w2"] = self.w2
        return params


@dataclass
class ConvTrace:
    """Intermediate tensors of one batched forward, kept for losses and diagnostics."""

    offsets: ad.Tensor  # (N*K, 3) neighbor offsets dx
    f1: ad.Tensor | None
    f2: ad.Tensor | None
    output: ad.Tensor


def fg_conv_forward(layer: FgConvLayer, coords: ad.Tensor, features: ad.Tensor,
                    neighbors: np.ndarray, trace: bool = False):
    """Batched FG-Conv over all points.

    ``neighbors`` is an (N, K) id array in canonical order, padded with the
    query's own id. Returns (N, f_out), or a :class:`ConvTrace` when ``trace``.
    """
    n, k = neighbors.shape
    if k != layer.k:
        raise ValueError(f"neighbor table has K={k}, layer expects {layer.k}")
    flat = neighbors.reshape(-1)
    owner = np.repeat(np.arange(n), k)
    x_k = ad.gather_rows(coords, flat)
    x_i = ad.gather_rows(coords, owner)
    f_k = ad.gather_rows(features, flat)
    offsets = ad.sub(x_k, x_i)

    f1 = f2 = None
    if layer.use_pfm:
        p_all = ad.concat([coords, features])
        p_k = ad.concat([x_k, f_k])
        p_i = ad.gather_rows(p_all, owner)
        dots = ad.sum(ad.mul(p_k, p_i), axis=1)
        norms = ad.mul(ad.norm_rows(p_k), ad.norm_rows(p_i))
        g = ad.reshape(ad.mul(dots, ad.reciprocal(norms, eps=ad.EPS)), n, k)
        z = ad.softmax(ad.matmul(g, ad.transpose(layer.w1)), axis=1)
        f1 = ad.concat([ad.mul(p_k, ad.reshape(z, n * k, 1)), p_k])
    if layer.use_gcm:
        kp = layer.kernel.positions()
        sq = ad.add(
            ad.add(ad.sum(ad.square(offsets), axis=1), ad.transpose(ad.sum(ad.square(kp), axis=1))),
            ad.scale(ad.matmul(offsets, ad.transpose(kp)), -2.0),
        )
        corr = ad.exp(ad.scale(ad.relu(sq), -1.0 / layer.kernel.bandwidth))
        weight = ad.scale(ad.sum(corr, axis=1), 1.0 / layer.kernel.size)
        f2 = ad.mul(ad.matmul(ad.concat([offsets, f_k]), layer.w_ker), weight)

    parts = [t for t in (f1, f2) if t is not None]
    fi = ad.concat(parts) if len(parts) > 1 else parts[0]
    fh = ad.segment_sum(fi, k)
    if layer.use_ag:
        w2_rows = ad.gather_rows(layer.w2, np.tile(np.arange(k), n))
        fa = ad.softmax(ad.segment_sum(ad.mul(fi, w2_rows), k), axis=1)
        fb = ad.add(fh, ad.mul(fa, fh))
    else:
        fb = fh
    out = ad.matmul(fb, layer.projection)
    if trace:
        return ConvTrace(offsets, f1, f2, out)
    return out


def fg_conv_reference(layer: FgConvLayer, coords: ad.Tensor, features: ad.Tensor,
                      neighbors: np.ndarray) -> ad.Tensor:
    """Row-by-row composition of the single-point operations (slow; for checks)."""
    rows = []
    for i, nbr in enumerate(neighbors):
        x_i = ad.gather_rows(coords, [i])
        x_k = ad.gather_rows(coords, nbr)
        f_k = ad.gather_rows(features, nbr)
        p_i = ad.concat([x_i, ad.gather_rows(features, [i])])
        f1 = pfm(p_i, ad.concat([x_k, f_k]), layer.w1) if layer.use_pfm else None
        f2 = gcm(x_i, x_k, f_k, layer.kernel, layer.w_ker) if layer.use_gcm else None
        rows.append(ag(f1, f2, layer.w2, layer.projection, attention=layer.use_ag))
    return ad.concat(rows, axis=0)
