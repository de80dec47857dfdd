import math

import numpy as np
import pytest

from fgnet import autodiff as ad
from fgnet.geometry import PointCloud, build_index, radius_neighbors
from fgnet.sampling import (GumbelSampler, SamplingError, anneal_tau, build_plan, default_schedule,
                            density_counts, farthest_point_sample, gumbel_hard_select, gumbel_max_rows,
                            gumbel_soft_select, inverse_density_sample, inverse_density_weights,
                            random_sample, straight_through)


# -- random ------------------------------------------------------------------


def test_random_sample_edges():
    assert random_sample(10, 10, 0).tolist() == list(range(10))
    assert random_sample(10, 0, 0).size == 0
    with pytest.raises(SamplingError):
        random_sample(10, 11, 0)


def test_random_sample_deterministic_and_unique():
    a, b = random_sample(1000, 100, 5), random_sample(1000, 100, 5)
    assert np.array_equal(a, b)
    assert len(np.unique(a)) == 100


def test_random_sample_inclusion_frequency():
    n, count, trials = 10_000, 1_000, 10_000
    hits = np.zeros(n)
    for t in range(trials):
        hits[random_sample(n, count, t)] += 1
    p = count / n
    freq = hits / trials
    se = math.sqrt(p * (1 - p) / trials)
    outside = np.abs(freq - p) > 3 * se
    # 0.27% of points are expected beyond 3 SE by chance alone
    assert outside.mean() < 0.01
    assert abs(freq.mean() - p) < 1e-12


# -- farthest point -------------------------------------------------------------


def brute_fps(coords, count, start):
    picked = [start]
    while len(picked) < count:
        best, best_d = None, -1.0
        for j in range(len(coords)):
            d = min(float(np.sum((coords[j] - coords[p]) ** 2)) for p in picked)
            if d > best_d:
                best, best_d = j, d
        picked.append(best)
    return picked


def test_fps_collinear():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    assert sorted(farthest_point_sample(coords, 2, 0).tolist()) == [0, 3]


def test_fps_count_one_and_all():
    coords = np.random.default_rng(0).normal(size=(20, 3))
    assert farthest_point_sample(coords, 1, 7).tolist() == [7]
    assert sorted(farthest_point_sample(coords, 20, 3).tolist()) == list(range(20))
    with pytest.raises(SamplingError):
        farthest_point_sample(coords, 21)


def test_fps_matches_brute_force():
    for seed in range(5):
        coords = np.random.default_rng(seed).uniform(size=(40, 3))
        assert farthest_point_sample(coords, 12, seed).tolist() == brute_fps(coords, 12, seed)


def test_fps_ties_lowest_id():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    assert farthest_point_sample(coords, 2, 0).tolist() == [0, 1]


def test_fps_permutation_equivariant():
    rng = np.random.default_rng(3)
    coords = rng.uniform(size=(60, 3))
    perm = rng.permutation(60)
    base = farthest_point_sample(coords, 15, 4)
    moved = farthest_point_sample(coords[perm], 15, int(np.flatnonzero(perm == 4)[0]))
    assert sorted(perm[moved].tolist()) == sorted(base.tolist())


# -- inverse density --------------------------------------------------------------


def test_ids_weights():
    assert inverse_density_weights(np.array([0, 1, 3])).tolist() == [1.0, 0.5, 0.25]


def test_ids_count_n_and_errors():
    counts = np.arange(5)
    assert inverse_density_sample(counts, 5, 0).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(SamplingError):
        inverse_density_sample(counts, 6, 0)


def test_ids_accepts_neighbor_list():
    coords = np.random.default_rng(1).uniform(size=(50, 3))
    cloud = PointCloud(coords)
    nl = radius_neighbors(build_index(cloud, 0.2), cloud, coords, 0.2)
    a = inverse_density_sample(nl, 10, 4)
    b = inverse_density_sample(density_counts(coords, 0.2), 10, 4)
    assert np.array_equal(a, b)


def test_ids_equal_counts_is_uniform():
    counts = np.full(50, 7)
    hits = np.zeros(50)
    trials = 4000
    for t in range(trials):
        hits[inverse_density_sample(counts, 10, t)] += 1
    se = math.sqrt(0.2 * 0.8 / trials)
    assert np.abs(hits / trials - 0.2).max() < 4.5 * se


def test_ids_sparse_cluster_preferred():
    # dense cluster of 100 points with N^r = 30, sparse cluster of 10 with N^r = 2
    counts = np.r_[np.full(100, 30), np.full(10, 2)]
    trials, count = 10_000, 20
    share = np.array([np.mean(inverse_density_sample(counts, count, t) >= 100) for t in range(trials)])
    # oracle: successive weighted draws without replacement via numpy's own sampler
    w = inverse_density_weights(counts)
    rng = np.random.default_rng(99)
    ref = np.array([np.mean(rng.choice(110, count, replace=False, p=w / w.sum()) >= 100)
                    for _ in range(trials)])
    pop = 10 / 110
    assert share.mean() - 3 * share.std(ddof=1) / math.sqrt(trials) > pop
    assert abs(share.mean() - ref.mean()) < 4 * math.sqrt(share.var() / trials + ref.var() / trials)


def test_ids_inclusion_monotone_in_density():
    counts = np.repeat([0, 4, 16, 64], 5)
    hits = np.zeros(20)
    for t in range(6000):
        hits[inverse_density_sample(counts, 5, t)] += 1
    groups = hits.reshape(4, 5).mean(axis=1)
    assert all(a > b for a, b in zip(groups, groups[1:]))


# -- Gumbel softmax ------------------------------------------------------------------


def instance(n=8, n_sel=3, width=4, seed=0, tau=1.0):
    rng = np.random.default_rng(seed)
    sampler = GumbelSampler(ad.parameter(rng.normal(size=(n_sel, width))), tau, seed)
    return sampler, rng.normal(size=(n, width))


def test_tau_must_be_positive():
    with pytest.raises(SamplingError):
        GumbelSampler(ad.parameter(np.zeros((1, 3))), 0.0)


def test_soft_rows_sum_to_one():
    for tau in (0.05, 0.3, 1.0):
        sampler, pts = instance(tau=tau, seed=int(tau * 100))
        soft, mixed = gumbel_soft_select(sampler, pts)
        np.testing.assert_allclose(soft.data.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(mixed.data, soft.data @ pts, atol=1e-12)


def test_hot_rows_are_uniform():
    sampler, pts = instance(tau=1e6)
    soft, _ = gumbel_soft_select(sampler, pts)
    assert np.abs(soft.data - 1 / 8).max() < 1e-3


def test_cold_rows_match_gumbel_max():
    for seed in range(20):
        sampler, pts = instance(n=12, n_sel=4, seed=seed, tau=1e-6)
        noise = sampler.noise(12)
        soft, _ = gumbel_soft_select(sampler, pts, noise)
        assert np.array_equal(soft.data.argmax(axis=1), gumbel_max_rows(sampler, pts, noise))
        np.testing.assert_allclose(soft.data.max(axis=1), 1.0, atol=1e-9)


def test_soft_select_gradients():
    sampler, pts = instance(n=8, n_sel=3, seed=4, tau=0.7)
    p = ad.parameter(pts)
    noise = sampler.noise(8)
    target = np.random.default_rng(5).normal(size=(3, 4))

    def loss(w, x):
        return ad.sum(ad.mul(gumbel_soft_select(GumbelSampler(w, 0.7, 4), x, noise)[1], ad.Tensor(target)))

    loss(sampler.weights, p).backward()
    for t in (sampler.weights, p):
        num = ad.numerical_gradient(lambda: loss(ad.Tensor(sampler.weights.data), ad.Tensor(p.data)).item(), t)
        assert ad.relative_error(t.grad, num) < 1e-4


def test_cap():
    sampler = GumbelSampler(ad.parameter(np.zeros((1, 3))))
    with pytest.raises(SamplingError, match="inverse-density"):
        gumbel_soft_select(sampler, np.zeros((100_001, 3)))


def test_hard_single_row():
    sampler, pts = instance(n_sel=1, seed=2)
    noise = sampler.noise(8)
    assert gumbel_hard_select(sampler, pts, noise).tolist() == gumbel_max_rows(sampler, pts, noise).tolist()


def test_hard_zero_noise_is_plain_argmax():
    pts = np.eye(4)
    w = np.array([[0.0, 3.0, 0.0, 0.0], [0.0, 0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0]])
    sampler = GumbelSampler(ad.parameter(w))
    assert gumbel_hard_select(sampler, pts, np.zeros((3, 4))).tolist() == [1, 3, 0]


def scalar_log_scores(w, pts):
    out = []
    for row in w:
        logits = [sum(a * b for a, b in zip(row, p)) for p in pts]
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        out.append([v - lse for v in logits])
    return np.array(out)


def test_hard_matches_scalar_oracle():
    for seed in range(10):
        sampler, pts = instance(n=10, n_sel=6, seed=seed)
        got = gumbel_hard_select(sampler, pts)
        log_s = scalar_log_scores(sampler.weights.data.tolist(), pts.tolist())
        noise = np.random.default_rng([seed, 0]).gumbel(size=(6, 10))
        used = set()
        for row in range(6):
            score = log_s[row] + noise[row]
            pick = int(np.argmax(score))
            attempt = 0
            while pick in used and attempt < 32:
                score = log_s[row] + np.random.default_rng([seed, 1, row, attempt]).gumbel(size=10)
                pick = int(np.argmax(score))
                attempt += 1
            if pick in used:
                pick = max((i for i in range(10) if i not in used), key=lambda i: score[i])
            used.add(pick)
            assert got[row] == pick
        assert len(set(got.tolist())) == 6


def test_hard_select_too_many():
    sampler, pts = instance(n=3, n_sel=4)
    with pytest.raises(SamplingError):
        gumbel_hard_select(sampler, pts)


def test_straight_through_values_and_gradient():
    sampler, pts = instance(seed=8)
    soft, _ = gumbel_soft_select(sampler, pts)
    hard = gumbel_hard_select(sampler, pts)
    st = straight_through(soft, hard)
    assert np.array_equal(st.data.argmax(axis=1), hard)
    np.testing.assert_allclose(st.data.sum(axis=1), 1.0, atol=1e-12)
    ad.sum(ad.mul(st, ad.Tensor(np.arange(24.0).reshape(3, 8)))).backward()
    assert np.abs(sampler.weights.grad).sum() > 0


def test_anneal_tau():
    taus = [anneal_tau(e, 50) for e in range(50)]
    assert taus[0] == 1.0
    assert taus[-1] == pytest.approx(0.05, rel=1e-12)
    assert all(a >= b for a, b in zip(taus, taus[1:]))


# -- plans ------------------------------------------------------------------------


def test_default_schedule_625():
    for n in (1, 4, 10):
        assert default_schedule(625 * n) == [125 * n, 25 * n, 5 * n, n, math.ceil(n / 5)]


def test_identity_plan():
    cloud = PointCloud(np.random.default_rng(0).uniform(size=(30, 3)))
    plan = build_plan(cloud, [30], "rs", 0)
    assert plan.stages[0].indices.tolist() == list(range(30))
    assert plan.upsample_to_full(0).tolist() == list(range(30))


def test_bad_schedules():
    cloud = PointCloud(np.random.default_rng(0).uniform(size=(30, 3)))
    for sched in ([10, 10], [10, 12], [31], []):
        with pytest.raises(SamplingError):
            build_plan(cloud, sched, "rs", 0)
    with pytest.raises(SamplingError):
        build_plan(cloud, [5], "rls", 0)


@pytest.mark.parametrize("mode", ["igsam", "fps", "rs", "ids", "gss"])
def test_plan_structure(mode):
    cloud = PointCloud(np.random.default_rng(1).uniform(size=(400, 3)))
    plan = build_plan(cloud, [80, 16, 4], mode, 3)
    assert plan.counts == [80, 16, 4]
    if mode == "igsam":
        assert [s.method for s in plan.stages] == ["ids", "ids", "gss"]
    prev = 400
    for s, stage in enumerate(plan.stages):
        assert len(np.unique(stage.indices)) == len(stage.indices)
        assert stage.indices.max() < prev
        assert stage.upsample.shape == (prev,) and stage.upsample.max() < len(stage.indices)
        g = plan.global_indices(s)
        assert g.max() < 400 and len(np.unique(g)) == len(g)
        # the nearest representative of a kept point is itself
        assert np.array_equal(plan.upsample_to_full(s)[g], np.arange(len(g)))
        prev = len(stage.indices)
    again = build_plan(cloud, [80, 16, 4], mode, 3)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(plan.stages, again.stages))
