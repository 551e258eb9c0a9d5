import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from radfield.core import FrequencyConfig
from radfield.field import (
    EncodingConfig,
    RaySampleBatch,
    init_field_model,
    stratified_samples,
)
from radfield.mlp import LayerSpec, MlpGradients, init_mlp
from radfield.sim import MATERIALS, generate_dataset, make_shoebox
from radfield.train import (
    OptimizerState,
    PlateauScheduler,
    ResourceGuardError,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    cast_training_rays,
    check_ray_budget,
    composite_loss,
    evaluate,
    grid_directions,
    train,
    _backward_pass,
    _forward_pass,
)


def tiny_dataset(n=12, seed=42, max_order=1):
    scene = make_shoebox((6.0, 5.0, 3.0), MATERIALS["pec"], (1.0, 1.2, 1.5))
    freq = FrequencyConfig(carrier_hz=2.412e9)
    return generate_dataset(scene, freq, n, train_fraction=0.75,
                            max_order=max_order, seed=seed)


def tiny_config(**kw):
    base = dict(t_far=14.0, batch_size=4, n_iterations=3, n_coarse=12,
                n_fine=12, log_every=1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# ----------------------------------------------------------------- optimizer


def test_adam_first_step_moves_by_lr_sign():
    rng = np.random.default_rng(0)
    params = init_mlp((LayerSpec(("x",), 4, "linear"),), {"x": 3}, rng,
                      dtype=np.float64)
    before = params.weights[0].copy()
    g = rng.standard_normal(params.weights[0].shape)
    grads = MlpGradients([g.copy()], [np.zeros(4)])
    state = OptimizerState.for_params(params)
    adam_step(params, grads, state, lr=1e-3, eps=1e-8)
    step = params.weights[0] - before
    assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)
    assert state.step == 1


def test_adam_zero_gradient_keeps_parameters():
    rng = np.random.default_rng(1)
    params = init_mlp((LayerSpec(("x",), 4, "linear"),), {"x": 3}, rng,
                      dtype=np.float64)
    before = params.flatten()
    grads = MlpGradients([np.zeros_like(params.weights[0])], [np.zeros(4)])
    state = OptimizerState.for_params(params)
    adam_step(params, grads, state, lr=1e-3)
    assert np.array_equal(params.flatten(), before)
    assert state.step == 1


def test_adam_two_steps_match_reference_formula():
    # scalar parameter, hand-rolled bias-corrected Adam
    params = init_mlp((LayerSpec(("x",), 1, "linear"),), {"x": 1},
                      np.random.default_rng(2), dtype=np.float64)
    params.weights[0][:] = 0.5
    params.biases[0][:] = 0.0
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    state = OptimizerState.for_params(params)

    theta, m, v = 0.5, 0.0, 0.0
    for t, g in ((1, 0.3), (2, -0.7)):
        grads = MlpGradients([np.array([[g]])], [np.zeros(1)])
        adam_step(params, grads, state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta -= lr * mhat / (math.sqrt(vhat) + eps)
    assert_allclose(params.weights[0][0, 0], theta, rtol=1e-12)


# ----------------------------------------------------------------- scheduler


def test_scheduler_constant_loss_single_cut_over_eleven_evals():
    sched = PlateauScheduler(patience=10, factor=0.9, threshold=1e-4,
                             min_lr=1e-6)
    lr = 5e-4
    rates = []
    for _ in range(11):
        lr = sched.step(1.0, lr)
        rates.append(lr)
    assert rates[:-1] == [5e-4] * 10
    assert rates[-1] == pytest.approx(4.5e-4, rel=1e-12)


def test_scheduler_decreasing_loss_never_cuts():
    sched = PlateauScheduler()
    lr = 5e-4
    loss = 1.0
    for _ in range(50):
        loss *= 0.99
        lr = sched.step(loss, lr)
    assert lr == 5e-4


def test_scheduler_improvement_resets_counter():
    sched = PlateauScheduler(patience=3)
    lr = 1e-3
    for value in (1.0, 1.0, 1.0, 0.5, 1.0, 1.0):
        lr = sched.step(value, lr)
    # bad streaks: 2 then 2, never reaching patience 3
    assert lr == 1e-3


def test_scheduler_respects_min_lr():
    sched = PlateauScheduler(patience=1, factor=0.1, min_lr=1e-6)
    lr = 1e-5
    for _ in range(10):
        lr = sched.step(1.0, lr)
    assert lr == 1e-6


def test_scheduler_tiny_improvement_counts_as_bad():
    sched = PlateauScheduler(patience=2, threshold=1e-4)
    lr = 1e-3
    lr = sched.step(1.0, lr)
    lr = sched.step(1.0 - 1e-6, lr)  # below the relative threshold
    lr = sched.step(1.0 - 2e-6, lr)
    assert lr == pytest.approx(9e-4)


# ----------------------------------------------------------- rays and budget


def test_grid_directions_counts_and_norms():
    g1 = grid_directions(10.0)
    assert g1.shape == (36 * 18, 3)
    assert_allclose(np.linalg.norm(g1, axis=1), 1.0, rtol=1e-12)
    assert grid_directions(1.0).shape[0] == 360 * 180


def test_ray_budget_guard_rejects_one_degree_grid():
    cfg = tiny_config(ray_grid_deg=1.0, n_coarse=64, n_fine=64, batch_size=32)
    with pytest.raises(ResourceGuardError, match="budget"):
        check_ray_budget(cfg, grid_directions(1.0).shape[0])


def test_cast_training_rays_counts_and_bounds():
    ds = tiny_dataset()
    cfg = tiny_config(n_random_rays=5)
    m = ds.measurements[0]
    batch = cast_training_rays(m, cfg, np.random.default_rng(0))
    assert batch.n_rays == len(m.doas) + 5
    assert batch.depths.shape == (batch.n_rays, cfg.n_coarse)
    assert_allclose(np.linalg.norm(batch.directions, axis=1), 1.0, rtol=1e-9)
    # leading rays follow the recorded arrival directions
    assert_allclose(batch.directions[: len(m.doas)], m.doa_units(), atol=1e-12)
    assert np.all(batch.origins == np.asarray(m.position))


def test_composite_loss_weighted_sum():
    h = np.array([1.0 + 0j])
    total, lc, lf = composite_loss(h * 0.8, h * 1.1, h)
    assert lc == pytest.approx(0.04)
    assert lf == pytest.approx(0.01)
    assert total == pytest.approx(0.1 * 0.04 + 0.9 * 0.01)


# ------------------------------------------------------------ gradient check


def test_full_pipeline_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    enc = EncodingConfig(n_freq_position=4, n_freq_direction=2)
    model = init_field_model(enc, -8 * np.ones(3), 8 * np.ones(3), 0.1, 12.0,
                             8, 8, 2.412e9, rng, dtype=np.float64)
    model.coarse.biases[-1][2] += 0.05  # keep sigma clear of the relu kink

    n_meas, rays_per = 2, 3
    dirs = rng.standard_normal((n_meas * rays_per, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.repeat(rng.uniform(-2, 2, (n_meas, 3)), rays_per, axis=0)
    meas = np.repeat(np.arange(n_meas), rays_per)
    depths = stratified_samples(0.1, 12.0, 8, n_meas * rays_per, rng)
    batch = RaySampleBatch(origins, dirs, depths, meas, 0.1, 12.0,
                           (12.0 - 0.1) / 8)
    truth = (rng.standard_normal(n_meas) + 1j * rng.standard_normal(n_meas)) * 1e-4
    denom = float(np.sum(truth.real**2 + truth.imag**2))

    p = _forward_pass(model, "coarse", batch, truth, denom)
    grads = _backward_pass(model, "coarse", batch, p, 1.0, denom)

    params = model.coarse
    eps = 1e-6
    worst = 0.0
    for li in range(len(params.weights)):
        for arr, garr in ((params.weights[li], grads.weights[li]),
                          (params.biases[li], grads.biases[li])):
            flat, gflat = arr.reshape(-1), garr.reshape(-1)
            probe = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for k in probe:
                old = flat[k]
                flat[k] = old + eps
                lp = _forward_pass(model, "coarse", batch, truth, denom).loss
                flat[k] = old - eps
                lm = _forward_pass(model, "coarse", batch, truth, denom).loss
                flat[k] = old
                fd = (lp - lm) / (2 * eps)
                an = gflat[k]
                if abs(fd) < 1e-14 and abs(an) < 1e-14:
                    continue
                worst = max(worst, abs(fd - an) / max(1e-12, abs(fd), abs(an)))
    # central differences carry O(eps^2) truncation plus roundoff noise
    assert worst < 5e-5


# ------------------------------------------------------------- training loop


def test_train_smoke_and_determinism():
    ds = tiny_dataset()
    cfg = tiny_config()
    model_a, report_a = train(ds, cfg)
    model_b, report_b = train(ds, cfg)
    assert report_a.iterations_run == 3
    assert math.isfinite(report_a.final_loss)
    assert np.array_equal(model_a.coarse.flatten(), model_b.coarse.flatten())
    assert np.array_equal(model_a.fine.flatten(), model_b.fine.flatten())
    assert report_a.final_loss == report_b.final_loss


def test_train_different_seeds_differ():
    ds = tiny_dataset()
    model_a, _ = train(ds, tiny_config(seed=5))
    model_b, _ = train(ds, tiny_config(seed=6))
    assert not np.array_equal(model_a.coarse.flatten(), model_b.coarse.flatten())


def test_train_resume_reproduces_uninterrupted_run(tmp_path):
    ds = tiny_dataset()
    straight, _ = train(ds, tiny_config(n_iterations=6))

    ckpt = str(tmp_path / "part.ckpt")
    train(ds, tiny_config(n_iterations=3), checkpoint_path=ckpt)
    resumed, report = train(ds, tiny_config(n_iterations=6), resume_from=ckpt)
    assert report.iterations_run == 6
    assert np.array_equal(straight.coarse.flatten(), resumed.coarse.flatten())
    assert np.array_equal(straight.fine.flatten(), resumed.fine.flatten())


def test_train_divergence_guard_raises_with_report():
    ds = tiny_dataset()
    cfg = tiny_config(divergence_loss=1e-9)  # any real loss trips the guard
    with pytest.raises(TrainingDiverged) as err:
        train(ds, cfg)
    assert err.value.report is not None
    assert err.value.report.stop_reason == "diverged"
    assert err.value.report.iterations_run == 1


def test_train_writes_jsonl_log(tmp_path):
    import json

    ds = tiny_dataset()
    log = tmp_path / "loss.jsonl"
    train(ds, tiny_config(), log_path=str(log))
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 3
    assert rows[0]["iteration"] == 1
    assert "loss" in rows[0] and "lr" in rows[0]


def test_train_with_noise_modes_runs():
    ds = tiny_dataset()
    _, r_fixed = train(ds, tiny_config(noise_snr_db=10.0, noise_mode="fixed"))
    _, r_draw = train(ds, tiny_config(noise_snr_db=10.0, noise_mode="per_draw"))
    assert math.isfinite(r_fixed.final_loss)
    assert math.isfinite(r_draw.final_loss)
    # different noise handling must lead to different trajectories
    assert r_fixed.final_loss != r_draw.final_loss


def test_train_early_stop_on_snr(tmp_path):
    # an absurdly low target triggers the early stop at the first eval
    ds = tiny_dataset()
    cfg = tiny_config(n_iterations=10, eval_every=2, early_stop_snr_db=-50.0)
    _, report = train(ds, cfg)
    assert report.stop_reason == "early_stop_snr"
    assert report.iterations_run == 2
    assert report.final_eval_snr_db is not None


# ---------------------------------------------------------------- evaluation


def test_evaluate_deterministic_and_scored():
    ds = tiny_dataset()
    model, _ = train(ds, tiny_config())
    a = evaluate(model, ds, split="test")
    b = evaluate(model, ds, split="test")
    assert np.array_equal(a.predictions, b.predictions)
    assert a.nmse == b.nmse
    assert a.n_measurements == len(ds.indices("test"))
    assert len(a.ray_partials) == a.n_measurements
    # per-ray contributions sum to the prediction
    for k in range(a.n_measurements):
        assert_allclose(a.ray_partials[k].sum(), a.predictions[k], rtol=1e-9)
    assert a.snr_db == pytest.approx(-10.0 * math.log10(a.nmse))


def test_evaluate_at_shifted_frequency_recomputes_truth():
    ds = tiny_dataset()
    model, _ = train(ds, tiny_config())
    base = evaluate(model, ds, split="test")
    shifted = evaluate(model, ds, split="test",
                       frequency_hz=ds.frequency.subcarrier_frequency(20))
    assert shifted.frequency_hz != base.frequency_hz
    assert not np.array_equal(shifted.truths, base.truths)
    assert not np.array_equal(shifted.predictions, base.predictions)


def test_evaluate_with_custom_doa_predictor():
    ds = tiny_dataset()
    model, _ = train(ds, tiny_config())
    tx = ds.scene.transmitter

    def predictor(position):
        d = tx - np.asarray(position)
        return (d / np.linalg.norm(d))[None, :]

    rep = evaluate(model, ds, split="test", doa_source="raysearch",
                   doa_predictor=predictor)
    assert all(p.shape == (1,) for p in rep.ray_partials)


def test_evaluate_raysearch_requires_predictor():
    ds = tiny_dataset()
    model, _ = train(ds, tiny_config())
    with pytest.raises(ValueError):
        evaluate(model, ds, doa_source="raysearch")
