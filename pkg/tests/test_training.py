import csv
import threading

import numpy as np
import pytest

from fgnet import autodiff as ad
from fgnet import checkpoint
from fgnet.data import toy_scene
from fgnet.geometry import PointCloud
from fgnet.losses import LossReport
from fgnet.network import reduced_config
from fgnet.sampling import anneal_tau
from fgnet.training import (AdamState, NonFiniteGradient, Prefetcher, TrainConfig, TrainingError, adam_step,
                            augment, gradcheck_instance, gradcheck_network, rotation_matrix, train)


def _adam_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_zero_gradient_is_noop():
    p = ad.parameter(np.array([[1.0, -2.0]]))
    adam_step({"p": p}, {"p": np.zeros((1, 2))}, AdamState(), TrainConfig(lr=0.1))
    assert p.data.tolist() == [[1.0, -2.0]]


def test_adam_matches_scalar_oracle():
    cfg = TrainConfig(lr=0.05)
    p = ad.parameter(np.array([[0.3]]))
    state = AdamState()
    grads = [0.7, -0.2]
    adam_step({"p": p}, {"p": np.array([[grads[0]]])}, state, cfg)
    # first step moves by lr in the sign of the gradient
    assert p.data[0, 0] == pytest.approx(0.3 - 0.05, abs=1e-9)
    adam_step({"p": p}, {"p": np.array([[grads[1]]])}, state, cfg)
    assert abs(p.data[0, 0] - _adam_oracle(0.3, grads, 0.05)) < 1e-12


def test_adam_non_finite_names_parameter():
    p = ad.parameter(np.ones((1, 1)))
    with pytest.raises(NonFiniteGradient, match="stage1.w"):
        adam_step({"stage1.w": p}, {"stage1.w": np.array([[np.nan]])}, AdamState(), TrainConfig())
    assert p.data[0, 0] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


# -- augmentation ------------------------------------------------------------------


def _cloud(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.normal(size=(n, 3)), rng.uniform(size=(n, 3)), rng.integers(0, 3, n), 3)


def test_augment_identity():
    c = _cloud()
    out = augment(c, 0, angles=[0, 0, 0], scales=[1, 1, 1])
    assert out.coords.tobytes() == c.coords.tobytes()
    assert out.labels.tolist() == c.labels.tolist()


def test_rotation_preserves_distances():
    c = _cloud()
    out = augment(c, 3, scale=False)
    d0 = np.linalg.norm(c.coords[:, None] - c.coords[None], axis=-1)
    d1 = np.linalg.norm(out.coords[:, None] - out.coords[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-12
    r = rotation_matrix([0.3, 1.1, -2.0])
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-15)


def test_scaling_scales_bbox():
    c = _cloud()
    s = np.array([0.9, 1.1, 1.05])
    out = augment(c, 0, angles=[0, 0, 0], scales=s)
    np.testing.assert_allclose(np.ptp(out.coords, axis=0), s * np.ptp(c.coords, axis=0), rtol=1e-14)
    drawn = augment(c, 5, rotate=False)
    ratio = np.ptp(drawn.coords, axis=0) / np.ptp(c.coords, axis=0)
    assert ((ratio >= 0.85) & (ratio <= 1.15)).all()


def test_tau_schedule_monotone():
    taus = [anneal_tau(e, 50) for e in range(50)]
    assert taus[0] == 1.0 and taus[-1] == pytest.approx(0.05, rel=1e-12)
    assert all(a > b for a, b in zip(taus, taus[1:]))


# -- loop ----------------------------------------------------------------------------


def _small_run(tmp_path, name, epochs=2, seed=0):
    scene = toy_scene(256, seed=1)
    cfg = reduced_config(2, num_classes=3, widths=[8, 16], neighbors=6, seed=seed)
    return train([scene], cfg, TrainConfig(lr=1e-2, epochs=epochs, seed=seed), tmp_path / name)


def test_zero_epochs(tmp_path):
    res = _small_run(tmp_path, "z", epochs=0)
    assert res.csv_path.read_text() == "epoch," + ",".join(LossReport.header()) + "\n"
    net, epoch = checkpoint.load(res.checkpoint)
    assert epoch == 0
    assert net.config == res.net.config


def test_csv_identical_and_consistent(tmp_path):
    a = _small_run(tmp_path, "a")
    b = _small_run(tmp_path, "b")
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    rows = list(csv.DictReader(a.csv_path.open()))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    for r in rows:
        v = {k: float(x) for k, x in r.items()}
        assert v["l_ker"] == pytest.approx(v["l_fit"] + v["l_rep1"] + v["l_rep2"], rel=1e-12)
        assert v["total"] == pytest.approx(v["l_ker"] + v["l1_seg"] + v["l2_ctx"], rel=1e-12)


def test_unlabelled_dataset_rejected(tmp_path):
    c = _cloud()
    c.labels = None
    with pytest.raises(TrainingError, match="no labels"):
        train([c], reduced_config(2), TrainConfig(epochs=1), tmp_path)
    with pytest.raises(TrainingError):
        train([], reduced_config(2), TrainConfig(epochs=1), tmp_path)


def test_network_gradcheck():
    net, batch = gradcheck_instance(seed=3)
    report = gradcheck_network(net, batch)
    assert report.passed, report.to_text()
    assert "input.coords" in report.errors


def test_frozen_kernels_get_no_gradient():
    net, batch = gradcheck_instance(seed=0, freeze_kernels=True)
    assert not any(name.endswith("kernel.deform") for name in net.named_parameters())
    total, _, _ = net.loss(batch)
    total.backward()
    for name, t in net.all_tensors().items():
        if name.endswith("kernel.deform"):
            assert not np.any(t.grad)


def test_prefetcher_threaded_matches_inline():
    seen = []

    def build(job):
        seen.append(threading.current_thread().name)
        return job * job

    threaded = list(Prefetcher(range(10), build, threaded=True))
    assert "fgnet-loader" in seen
    assert threaded == list(Prefetcher(range(10), build, threaded=False)) == [(j, j * j) for j in range(10)]


def test_prefetcher_surfaces_loader_errors():
    def build(job):
        if job == 2:
            raise RuntimeError("bad batch")
        return job

    with pytest.raises(RuntimeError, match="bad batch"):
        list(Prefetcher(range(5), build, threaded=True))
