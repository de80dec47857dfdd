import math

import numpy as np
import pytest

from fgnet import autodiff as ad
from fgnet.fgconv import (NUM_KERNEL_POINTS, FgConvLayer, KernelSet, ag, cosine_similarities, fg_conv_forward,
                          fg_conv_reference, gcm, kernel_correlation, kernel_dispositions, pfm)
from fgnet.geometry import PointCloud, build_index, radius_neighbors


def layer(f_in=2, f_out=5, k=4, radius=0.5, seed=0, **kw):
    return FgConvLayer.create(f_in, f_out, radius, np.random.default_rng(seed), k=k, **kw)


def table(coords, radius, k):
    cloud = PointCloud(coords)
    return radius_neighbors(build_index(cloud, radius), cloud, coords, radius).padded(k)


def random_cloud(n=64, f=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, 3)), rng.normal(size=(n, f))


# -- kernels ------------------------------------------------------------------


def test_dispositions_in_ball_with_center():
    base = kernel_dispositions(NUM_KERNEL_POINTS, 0.3, seed=0)
    assert base.shape == (15, 3)
    np.testing.assert_array_equal(base[0], 0.0)
    assert (np.linalg.norm(base, axis=1) <= 0.3 + 1e-12).all()
    np.testing.assert_array_equal(base, kernel_dispositions(NUM_KERNEL_POINTS, 0.3, seed=0))
    d = np.linalg.norm(base[:, None] - base[None], axis=2) + np.eye(15)
    assert d.min() > 0.05


def test_kernel_defaults():
    k = KernelSet.create(0.5)
    assert k.sigma == pytest.approx(0.2)
    assert k.m == 1.0
    assert k.bandwidth == pytest.approx(0.04)
    np.testing.assert_array_equal(k.positions().data, k.base)


def test_correlation_peak_and_unit_exponent():
    k = KernelSet.create(0.5)
    c = kernel_correlation(k, k.base[3])
    assert c.data[0, 3] == pytest.approx(1 / 15, abs=1e-15)
    direction = np.array([0.6, 0.0, 0.8])
    c = kernel_correlation(k, k.base[0] + direction * math.sqrt(k.bandwidth))
    assert c.data[0, 0] == pytest.approx(math.exp(-1) / 15, abs=1e-15)


def test_correlation_scalar_oracle():
    rng = np.random.default_rng(1)
    k = KernelSet.create(0.4)
    k.deform.data[...] = rng.normal(scale=0.05, size=(15, 3))
    for _ in range(5):
        off = rng.uniform(-0.2, 0.2, size=3)
        got = kernel_correlation(k, off).data[0]
        for i in range(15):
            s = k.base[i] + k.deform.data[i]
            d2 = sum((s[j] - off[j]) ** 2 for j in range(3))
            assert abs(got[i] - math.exp(-d2 / k.bandwidth) / 15) < 1e-12
        assert (got > 0).all() and (got <= 1 / 15).all()


def test_frozen_kernel_ignores_deformation():
    k = KernelSet.create(0.5, frozen=True)
    k.deform.data[...] = 1.0
    np.testing.assert_array_equal(k.positions().data, k.base)


# -- PFM -------------------------------------------------------------------------


def test_pfm_identical_neighbors():
    p = ad.Tensor(np.array([[0.3, -0.2, 0.5, 1.0]]))
    pk = ad.Tensor(np.repeat(p.data, 4, axis=0))
    np.testing.assert_allclose(cosine_similarities(p, pk).data, 1.0, atol=1e-12)
    out = pfm(p, pk, ad.Tensor(np.eye(4)))
    np.testing.assert_allclose(out.data[:, :4], pk.data / 4, atol=1e-12)
    np.testing.assert_array_equal(out.data[:, 4:], pk.data)


def test_pfm_orthogonal_and_zero():
    p = ad.Tensor([[1.0, 0.0, 0.0]])
    pk = ad.Tensor([[0.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
    assert cosine_similarities(p, pk).data.ravel().tolist() == [0.0, 0.0]


def test_pfm_scalar_oracle_and_gradient():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(1, 5))
    pk = rng.normal(size=(4, 5))
    g = cosine_similarities(ad.Tensor(p), ad.Tensor(pk)).data.ravel()
    for k in range(4):
        dot = sum(a * b for a, b in zip(p[0], pk[k]))
        na = math.sqrt(sum(a * a for a in p[0]))
        nb = math.sqrt(sum(b * b for b in pk[k]))
        assert abs(g[k] - dot / (na * nb)) < 1e-12
    w1 = ad.parameter(rng.normal(size=(4, 4)))
    target = ad.Tensor(rng.normal(size=(4, 10)))
    ad.sum(ad.mul(pfm(ad.Tensor(p), ad.Tensor(pk), w1), target)).backward()
    num = ad.numerical_gradient(
        lambda: ad.sum(ad.mul(pfm(ad.Tensor(p), ad.Tensor(pk), ad.Tensor(w1.data)), target)).item(), w1)
    assert ad.relative_error(w1.grad, num) < 1e-4


# -- GCM ------------------------------------------------------------------------


def test_gcm_vanishes_far_from_kernel():
    k = KernelSet.create(0.5)
    k.deform.data[...] = 100.0
    x = np.random.default_rng(0).normal(scale=0.1, size=(4, 3))
    out = gcm(ad.Tensor(x[:1]), ad.Tensor(x), ad.Tensor(np.ones((4, 2))), k, ad.Tensor(np.ones((5, 10))))
    assert np.abs(out.data).max() < 1e-300


def test_gcm_unit_correlation():
    k = KernelSet(np.zeros((1, 3)), ad.parameter(np.zeros((1, 3))), 0.2, 1.0, 0.5)
    x_i = ad.Tensor([[0.2, 0.1, -0.3]])
    f_k = ad.Tensor([[0.7, -1.1]])
    w = ad.Tensor(np.eye(5))
    out = gcm(x_i, x_i, f_k, k, w)
    # a single kernel point on the neighbor: weight 1/N_s = 1, row = (dx, f_k)
    np.testing.assert_allclose(out.data, [[0.0, 0.0, 0.0, 0.7, -1.1]], atol=1e-15)


def test_gcm_deformation_gradient():
    rng = np.random.default_rng(3)
    k = KernelSet.create(0.5)
    k.deform.data[...] = rng.normal(scale=0.05, size=(15, 3))
    x = rng.normal(scale=0.2, size=(5, 3))
    f = rng.normal(size=(5, 2))
    w = ad.Tensor(rng.normal(size=(5, 10)))
    target = ad.Tensor(rng.normal(size=(5, 10)))

    def value():
        return ad.sum(ad.mul(gcm(ad.Tensor(x[:1]), ad.Tensor(x), ad.Tensor(f), k, w), target))

    value().backward()
    grad = k.deform.grad.copy()
    assert ad.relative_error(grad, ad.numerical_gradient(lambda: value().item(), k.deform)) < 1e-4


# -- AG --------------------------------------------------------------------------


def test_ag_single_neighbor():
    rng = np.random.default_rng(4)
    f1, f2 = ad.Tensor(rng.normal(size=(1, 3))), ad.Tensor(rng.normal(size=(1, 3)))
    w2 = ad.Tensor([[0.7]])
    proj = ad.Tensor(np.eye(6))
    row = np.concatenate([f1.data, f2.data], axis=1)
    fa = np.exp(0.7 * row) / np.exp(0.7 * row).sum()
    np.testing.assert_allclose(ag(f1, f2, w2, proj).data, row + fa * row, atol=1e-14)


def test_ag_zero_w2():
    rng = np.random.default_rng(5)
    f1, f2 = ad.Tensor(rng.normal(size=(3, 2))), ad.Tensor(rng.normal(size=(3, 2)))
    fh = np.concatenate([f1.data, f2.data], axis=1).sum(axis=0)
    out = ag(f1, f2, ad.Tensor(np.zeros((3, 1))), ad.Tensor(np.eye(4)))
    np.testing.assert_allclose(out.data[0], fh * (1 + 1 / 4), atol=1e-14)


def test_ag_scalar_oracle_and_gradients():
    rng = np.random.default_rng(6)
    f1, f2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    w2 = ad.parameter(rng.normal(size=(3, 1)))
    proj = ad.parameter(rng.normal(size=(4, 3)))
    fi = np.concatenate([f1, f2], axis=1)
    logits = [sum(w2.data[k, 0] * fi[k, c] for k in range(3)) for c in range(4)]
    z = sum(math.exp(v) for v in logits)
    fh = [sum(fi[k, c] for k in range(3)) for c in range(4)]
    fb = [fh[c] + math.exp(logits[c]) / z * fh[c] for c in range(4)]
    expect = [sum(fb[c] * proj.data[c, o] for c in range(4)) for o in range(3)]
    out = ag(ad.Tensor(f1), ad.Tensor(f2), w2, proj)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-12)
    ad.sum(out).backward()
    f = lambda: ad.sum(ag(ad.Tensor(f1), ad.Tensor(f2), ad.Tensor(w2.data), ad.Tensor(proj.data))).item()
    for p in (w2, proj):
        assert ad.relative_error(p.grad, ad.numerical_gradient(f, p)) < 1e-4


# -- layer ---------------------------------------------------------------------------


def test_layer_dimensions():
    lay = layer(f_in=3, f_out=7, k=5)
    assert lay.w_ker.shape == (6, 12)
    assert lay.f_mid == 12
    assert lay.projection.shape == (24, 7)
    assert lay.w1.shape == (5, 5) and lay.w2.shape == (5, 1)


def test_batched_equals_per_point():
    coords, feats = random_cloud(64, 2, seed=7)
    lay = layer(k=6, radius=0.3, seed=7)
    lay.kernel.deform.data[...] = np.random.default_rng(8).normal(scale=0.03, size=(15, 3))
    nbr = table(coords, 0.3, 6)
    a = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), nbr)
    b = fg_conv_reference(lay, ad.Tensor(coords), ad.Tensor(feats), nbr)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("flags", [dict(use_pfm=False), dict(use_gcm=False), dict(use_ag=False)])
def test_ablations_match_reference(flags):
    coords, feats = random_cloud(20, 2, seed=9)
    lay = layer(k=4, radius=0.4, seed=9, **flags)
    nbr = table(coords, 0.4, 4)
    a = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), nbr)
    b = fg_conv_reference(lay, ad.Tensor(coords), ad.Tensor(feats), nbr)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-10, atol=1e-12)


def test_needs_a_branch():
    with pytest.raises(ValueError):
        layer(use_pfm=False, use_gcm=False)


def test_gcm_translation_invariance():
    coords, feats = random_cloud(40, 2, seed=10)
    lay = layer(k=5, radius=0.35, seed=10)
    nbr = table(coords, 0.35, 5)
    shift = np.array([3.25, -1.5, 0.75])
    a = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), nbr, trace=True)
    b = fg_conv_forward(lay, ad.Tensor(coords + shift), ad.Tensor(feats), nbr, trace=True)
    assert np.abs(a.f2.data - b.f2.data).max() < 1e-12


def test_zero_weights_give_zero_output():
    coords, feats = random_cloud(16, 2, seed=11)
    lay = layer(k=4, seed=11)
    for t in (lay.w_ker, lay.w1, lay.w2, lay.projection):
        t.data[...] = 0.0
    out = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), table(coords, 0.5, 4))
    assert np.all(out.data == 0.0)


def test_isolated_point_uses_self():
    coords = np.array([[0.0, 0, 0], [5.0, 5, 5]])
    nbr = table(coords, 0.1, 3)
    assert nbr.tolist() == [[0, 0, 0], [1, 1, 1]]
    out = fg_conv_forward(layer(f_in=0, k=3, seed=1), ad.Tensor(coords), ad.Tensor(np.zeros((2, 0))), nbr)
    assert np.isfinite(out.data).all()


def test_gcm_neighbor_permutation():
    coords, feats = random_cloud(30, 2, seed=12)
    lay = layer(k=5, radius=0.4, seed=12, use_pfm=False, use_ag=False)
    nbr = table(coords, 0.4, 5)
    perm = np.random.default_rng(0).permutation(5)
    a = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), nbr, trace=True)
    b = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), nbr[:, perm], trace=True)
    rows_a = a.f2.data.reshape(30, 5, -1)
    rows_b = b.f2.data.reshape(30, 5, -1)
    np.testing.assert_allclose(rows_b, rows_a[:, perm], atol=1e-14)
    np.testing.assert_allclose(a.output.data, b.output.data, atol=1e-12)


def test_canonical_order_makes_output_deterministic():
    coords, feats = random_cloud(30, 2, seed=13)
    perm = np.random.default_rng(1).permutation(30)
    lay = layer(k=5, radius=0.4, seed=13)
    a = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(feats), table(coords, 0.4, 5))
    b = fg_conv_forward(lay, ad.Tensor(coords[perm]), ad.Tensor(feats[perm]), table(coords[perm], 0.4, 5))
    # shuffled input, re-sorted neighborhoods: identical per-point output
    np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)


def test_zero_features_still_geometric():
    coords, _ = random_cloud(20, 2, seed=14)
    lay = layer(k=4, radius=0.4, seed=14, use_pfm=False)
    out = fg_conv_forward(lay, ad.Tensor(coords), ad.Tensor(np.zeros((20, 2))), table(coords, 0.4, 4), trace=True)
    assert np.abs(out.f2.data).max() > 0


def test_layer_gradients():
    coords, feats = random_cloud(12, 2, seed=15)
    lay = layer(k=4, radius=0.5, seed=15)
    lay.kernel.deform.data[...] = np.random.default_rng(16).normal(scale=0.05, size=(15, 3))
    nbr = table(coords, 0.5, 4)
    x = ad.parameter(coords)
    f = ad.parameter(feats)
    target = ad.Tensor(np.random.default_rng(17).normal(size=(12, 5)))

    def value(c, g):
        return ad.sum(ad.mul(fg_conv_forward(lay, c, g, nbr), target))

    value(x, f).backward()
    params = dict(lay.parameters(), coords=x, features=f)
    for name, p in params.items():
        analytic = p.grad.copy()
        num = ad.numerical_gradient(lambda: value(ad.Tensor(x.data), ad.Tensor(f.data)).item(), p)
        assert ad.relative_error(analytic, num) < 1e-4, name
