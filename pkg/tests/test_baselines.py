import numpy as np
import pytest
from numpy.testing import assert_allclose

from radfield.baselines import (
    DirectMlpConfig,
    DirectMlpModel,
    KnnModel,
    direct_mlp_layers,
    direct_mlp_predict,
    evaluate_baseline,
    fit_knn,
    knn_predict,
    train_direct_mlp,
)
from radfield.core import FrequencyConfig, Measurement
from radfield.io import load_baseline, save_baseline
from radfield.sim import MATERIALS, Dataset, make_shoebox


def random_knn(n=20, seed=0, k=3):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0, 5, size=(n, 3))
    channels = rng.normal(size=n) + 1j * rng.normal(size=n)
    return KnnModel(positions, channels, k), rng


def toy_dataset(n=10, seed=3, channel_scale=1e-3):
    scene = make_shoebox((4.0, 4.0, 3.0), MATERIALS["pec"], (2.0, 2.0, 1.5))
    rng = np.random.default_rng(seed)
    measurements = []
    for _ in range(n):
        pos = rng.uniform(0.3, 2.7, size=3)
        h = channel_scale * (rng.normal() + 1j * rng.normal())
        measurements.append(Measurement(pos, h, []))
    return Dataset(scene, FrequencyConfig(2.4e9), measurements, ["train"] * n, seed=0)


def test_knn_validation():
    with pytest.raises(ValueError):
        KnnModel(np.zeros((3, 3)), np.zeros(3, dtype=complex), 0)
    with pytest.raises(ValueError):
        KnnModel(np.zeros((3, 3)), np.zeros(3, dtype=complex), 4)
    with pytest.raises(ValueError):
        KnnModel(np.zeros((0, 3)), np.zeros(0, dtype=complex), 1)


def test_knn_exact_at_training_point():
    model, _ = random_knn(k=1)
    for i in (0, 7, 19):
        assert knn_predict(model, model.positions[i]) == model.channels[i]


def test_knn_full_k_is_global_mean():
    model, _ = random_knn(n=15, k=15)
    got = knn_predict(model, np.array([9.0, 9.0, 9.0]))
    assert got == pytest.approx(complex(model.channels.mean()), rel=1e-15)


def test_knn_matches_exhaustive_oracle():
    model, rng = random_knn(n=20, seed=11, k=3)
    for _ in range(30):
        q = rng.uniform(-1, 6, size=3)
        dist = np.linalg.norm(model.positions - q, axis=1)
        order = sorted(range(20), key=lambda i: (dist[i], i))
        want = complex(model.channels[np.array(order[:3])].mean())
        assert knn_predict(model, q) == want


def test_knn_tie_breaks_toward_lower_index():
    positions = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    channels = np.array([1 + 1j, 2 + 2j, 3 + 3j])
    assert knn_predict(KnnModel(positions, channels, 1), np.zeros(3)) == 1 + 1j
    got = knn_predict(KnnModel(positions, channels, 2), np.zeros(3))
    assert got == pytest.approx((1 + 1j + 2 + 2j) / 2)


def test_knn_translation_invariant():
    model, rng = random_knn(n=20, seed=4, k=3)
    shift = np.array([11.0, -7.0, 3.0])
    shifted = KnnModel(model.positions + shift, model.channels, 3)
    for _ in range(10):
        q = rng.uniform(0, 5, size=3)
        assert knn_predict(shifted, q + shift) == pytest.approx(
            knn_predict(model, q), rel=1e-9
        )


def test_fit_knn_uses_split():
    ds = toy_dataset(n=10)
    ds.split[8] = "test"
    ds.split[9] = "test"
    model = fit_knn(ds, k=3)
    assert model.positions.shape == (8, 3)


def test_direct_mlp_shape():
    layers = direct_mlp_layers()
    assert len(layers) == 8  # seven hidden plus the (re, im) head
    assert all(spec.width == 128 for spec in layers[:-1])
    assert layers[-1].width == 2 and layers[-1].activation == "tanh"


def test_direct_mlp_memorizes_small_dataset():
    ds = toy_dataset(n=10)
    model = train_direct_mlp(ds, DirectMlpConfig(n_iterations=1000, seed=0))
    report = evaluate_baseline(model, ds, split="train")
    assert report.kind == "direct_mlp"
    assert report.nmse < 1e-3


def test_direct_mlp_deterministic():
    ds = toy_dataset(n=10)
    cfg = DirectMlpConfig(n_iterations=40, seed=7)
    a = train_direct_mlp(ds, cfg)
    b = train_direct_mlp(ds, cfg)
    assert all(
        np.array_equal(x, y) for x, y in zip(a.params.weights, b.params.weights)
    )
    assert a.channel_scale == b.channel_scale


def test_direct_mlp_prediction_bounded():
    ds = toy_dataset(n=10)
    model = train_direct_mlp(ds, DirectMlpConfig(n_iterations=10, seed=1))
    # tanh head: no prediction can exceed sqrt(2) * channel_scale
    bound = np.sqrt(2.0) * model.channel_scale
    for q in np.random.default_rng(0).uniform(0, 4, size=(20, 3)):
        assert abs(direct_mlp_predict(model, q)) <= bound + 1e-12


def test_baseline_round_trip(tmp_path):
    ds = toy_dataset(n=10)
    knn = fit_knn(ds, k=3)
    p1 = tmp_path / "knn.rfb"
    save_baseline(p1, knn)
    knn2 = load_baseline(p1)
    assert isinstance(knn2, KnnModel) and knn2.k == 3
    q = np.array([1.0, 2.0, 1.0])
    assert knn_predict(knn2, q) == knn_predict(knn, q)

    mlp = train_direct_mlp(ds, DirectMlpConfig(n_iterations=20, seed=2))
    p2 = tmp_path / "direct.rfb"
    save_baseline(p2, mlp)
    mlp2 = load_baseline(p2)
    assert isinstance(mlp2, DirectMlpModel)
    assert direct_mlp_predict(mlp2, q) == direct_mlp_predict(mlp, q)

    junk = tmp_path / "junk.rfb"
    junk.write_bytes(b"not a blob at all")
    with pytest.raises(ValueError):
        load_baseline(junk)
    with pytest.raises(TypeError):
        save_baseline(tmp_path / "bad.rfb", object())


def test_evaluate_baseline_needs_measurements():
    ds = toy_dataset(n=10)
    with pytest.raises(ValueError):
        evaluate_baseline(fit_knn(ds, k=1), ds, split="test")
