import math

import numpy as np
import pytest

import dglab


def test_gate_follows_inner_product_sign():
    updated, inner, cos = dglab.gate([1.0, 0.0], [1.0, 1.0])
    assert updated and inner == 1.0
    assert cos == pytest.approx(1 / math.sqrt(2))
    assert not dglab.gate([1.0, 0.0], [-1.0, 0.0])[0]
    assert dglab.gate([1.0, 0.0], [0.0, 1.0], rule="PSEUDOCODE")[0]
    with pytest.raises(dglab.InternalError):
        dglab.gate([1.0], [1.0, 2.0])


def test_ema_update_closed_form():
    tea, stu = np.ones(5), np.zeros(5)
    for _ in range(10):
        tea = dglab.ema_update(tea, stu, True, 0.9)
    np.testing.assert_allclose(tea, 0.9**10, rtol=1e-12)
    np.testing.assert_array_equal(dglab.ema_update(tea, stu, False, 0.9), tea)


def test_contrastive_all_equal_is_log3():
    pool = [[1.0, 0.0], [1.0, 0.0]]
    loss = dglab.contrastive_loss(pool, [(0, 1), (1, 0)], [(0, 1)] * 4)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(dglab.ConfigError):
        dglab.contrastive_loss(pool, [], [(0, 1)])


def test_boundary_of_constant_vanishes():
    b = dglab.boundary_extract(np.full((2, 8, 8, 8), 3.0))
    assert b.shape == (2, 8, 8, 8)
    assert np.abs(b).max() < 1e-12


def test_boundary_matches_numpy_fft():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1, 8, 8, 8))
    spec = np.fft.fftshift(np.fft.fftn(z[0]))
    spec[3:5, 3:5, 3:5] = 0  # side ceil(0.25 * 8) = 2 around the centre index 4
    want = np.fft.ifftn(np.fft.ifftshift(spec)).real
    np.testing.assert_allclose(dglab.boundary_extract(z)[0], want, atol=1e-10)


def test_metrics_worked_example():
    pred = np.zeros((4, 4, 8), np.uint8)
    gt = np.zeros_like(pred)
    pred.flat[:10] = 1
    gt.flat[2:12] = 1
    m = dglab.segmentation_metrics(pred, gt)
    assert m["dsc"] == pytest.approx(0.8)
    assert m["sen"] == pytest.approx(0.8)
    assert m["jac"] == pytest.approx(8 / 12)
    assert m["vs"] == pytest.approx(1.0)


def test_dce_loss_of_perfect_prediction_is_small():
    _, mask = dglab.generate_phantom(3, 16, 2.0, 3.0)
    assert dglab.dce_loss(mask.astype(float), mask) < 1e-5
    assert dglab.dce_loss(np.full(mask.shape, 0.5), mask) > 0.5


def test_overlap_score_extremes():
    rng = np.random.default_rng(1)
    far = np.vstack([rng.normal(size=(6, 3)), rng.normal(size=(6, 3)) + 100])
    assert dglab.domain_overlap_score(far, [0] * 6 + [1] * 6) == 0.0
    with pytest.raises(dglab.DegenerateInputError):
        dglab.domain_overlap_score(far, [0] * 12)


def test_phantom_is_seeded_and_sparse():
    img, mask = dglab.generate_phantom(7, 32, 2.0, 4.0)
    img2, _ = dglab.generate_phantom(7, 32, 2.0, 4.0)
    assert img.shape == mask.shape == (32, 32, 32)
    np.testing.assert_array_equal(img, img2)
    assert 0 < mask.mean() < 0.05


def test_train_and_evaluate_round_trip(tmp_path):
    dglab.build_dataset(tmp_path / "data", domains=3, samples=2, seed=5, size=16, rmin=2.0, rmax=3.0)
    config = {
        "epochs": 1,
        "optimizer": "adam",
        "base_lr": 0.003,
        "ema": {"alpha": 0.9},
        "backbone": {"in_shape": [16, 16, 16], "latent_channels": 4},
    }
    records = dglab.train(config, tmp_path / "data", 2, tmp_path / "run")
    assert len(records) == 2
    assert all("gate" in r for r in records)
    report = dglab.evaluate(tmp_path / "run", tmp_path / "data", 2)
    assert len(report["cases"]) == 2
    assert 0.0 <= report["mean"]["dsc"] <= 1.0
    with pytest.raises(dglab.ConfigError):
        dglab.train({"epochs": 1, "ema": {"alpah": 0.9}}, tmp_path / "data", 2, tmp_path / "bad")
