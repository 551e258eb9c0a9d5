"""Numpy and compiled kernel backends must agree to float tolerance."""

import numpy as np
import pytest

from radfield.backend import get_backend
from radfield.core import FrequencyConfig
from radfield.sim import MATERIALS, generate_dataset, make_shoebox
from radfield.train import TrainConfig, train

npk = get_backend("numpy")
try:
    ck = get_backend("compiled")
except ImportError:
    ck = None

needs_compiled = pytest.mark.skipif(ck is None, reason="compiled backend not built")

# f32 sums round differently between double-accumulator loops and numpy's
# pairwise float32 reductions, and cancellation inflates relative error
TOLS = {np.float64: 1e-12, np.float32: 3e-5}


def _close(a, b, rtol):
    scale = float(np.max(np.abs(a))) if np.size(a) else 0.0
    np.testing.assert_allclose(a, b, rtol=rtol, atol=rtol * max(scale, 1e-30))


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("act", [0, 1, 2])
def test_linear_forward_matches(dtype, act):
    rng = np.random.default_rng(11)
    x1 = rng.standard_normal((37, 63)).astype(dtype)
    x2 = rng.standard_normal((37, 64)).astype(dtype)
    w = rng.standard_normal((127, 64)).astype(dtype)
    b = rng.standard_normal(64).astype(dtype)
    a_np = npk.linear_forward([x1, x2], w, b, act)
    a_c = ck.linear_forward([x1, x2], w, b, act)
    assert a_c.dtype == dtype
    _close(a_np, a_c, TOLS[dtype])


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("act", [0, 1, 2])
def test_linear_backward_matches(dtype, act):
    rng = np.random.default_rng(12)
    x1 = rng.standard_normal((29, 60)).astype(dtype)
    x2 = rng.standard_normal((29, 64)).astype(dtype)
    w = rng.standard_normal((124, 64)).astype(dtype)
    b = rng.standard_normal(64).astype(dtype)
    act_out = npk.linear_forward([x1, x2], w, b, act)
    d = rng.standard_normal(act_out.shape).astype(dtype)
    dw1, db1, dx1 = npk.linear_backward([x1, x2], act_out, w, d.copy(), act, {0, 1})
    dw2, db2, dx2 = ck.linear_backward([x1, x2], act_out.copy(), w, d.copy(), act, {0, 1})
    rtol = TOLS[dtype]
    _close(dw1, dw2, rtol)
    _close(db1, db2, rtol)
    for p, q in zip(dx1, dx2):
        _close(p, q, rtol)


@needs_compiled
def test_linear_backward_skips_unwanted_inputs():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((9, 10))
    w = rng.standard_normal((10, 4))
    b = rng.standard_normal(4)
    act_out = ck.linear_forward([x], w, b, 1)
    _, _, dx = ck.linear_backward([x], act_out, w, np.ones_like(act_out), 1, set())
    assert dx == [None]


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("include_input", [True, False])
def test_positional_encode_matches(dtype, include_input):
    rng = np.random.default_rng(14)
    x = rng.uniform(-1.0, 1.0, (55, 3))
    e1 = npk.positional_encode_core(x, 10, include_input, dtype)
    e2 = ck.positional_encode_core(x, 10, include_input, dtype)
    assert e2.dtype == dtype and e1.shape == e2.shape
    _close(e1.astype(np.float64), e2.astype(np.float64), 1e-12)


@needs_compiled
def test_compute_weights_matches():
    rng = np.random.default_rng(15)
    sigma = rng.uniform(0.0, 3.0, (40, 65))
    sigma[rng.uniform(size=sigma.shape) < 0.3] = 0.0
    delta = rng.uniform(0.01, 0.5, (40, 65))
    t1, a1, w1 = npk.compute_weights_core(sigma, delta)
    t2, a2, w2 = ck.compute_weights_core(sigma, delta)
    _close(t1, t2, 1e-14)
    _close(a1, a2, 1e-14)
    _close(w1, w2, 1e-14)


@needs_compiled
def test_render_forward_matches():
    rng = np.random.default_rng(16)
    depths = np.sort(rng.uniform(0.02, 20.0, (40, 65)), axis=1)
    sigma = rng.uniform(0.0, 2.0, (40, 65))
    delta = rng.uniform(0.01, 0.5, (40, 65))
    _, _, w = npk.compute_weights_core(sigma, delta)
    ip = rng.uniform(-1, 1, (40, 65)).astype(np.float32)
    qp = rng.uniform(-1, 1, (40, 65)).astype(np.float32)
    r1 = npk.render_forward_core(depths, w, ip, qp, 9.9e-3, 50.5, 0.1)
    r2 = ck.render_forward_core(depths, w, ip, qp, 9.9e-3, 50.5, 0.1)
    for u, v in zip(r1, r2):
        _close(u, v, 1e-12)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_render_backward_matches(dtype):
    rng = np.random.default_rng(17)
    depths = np.sort(rng.uniform(0.02, 20.0, (30, 48)), axis=1)
    sigma = rng.uniform(0.0, 2.0, (30, 48))
    delta = rng.uniform(0.01, 0.5, (30, 48))
    t, a, w = npk.compute_weights_core(sigma, delta)
    ip = rng.uniform(-1, 1, (30, 48)).astype(dtype)
    qp = rng.uniform(-1, 1, (30, 48)).astype(dtype)
    _, _, amp, cos_p, sin_p = npk.render_forward_core(
        depths, w, ip, qp, 9.9e-3, 50.5, 0.1)
    du = rng.standard_normal(30)
    dv = rng.standard_normal(30)
    out1 = npk.render_backward_core(
        w, t, a, delta, amp, cos_p, sin_p, ip, qp, du, dv, dtype)
    out2 = ck.render_backward_core(
        w, t, a, delta, amp, cos_p, sin_p, ip, qp, du, dv, dtype)
    for u, v in zip(out1, out2):
        assert u.dtype == v.dtype == dtype
        _close(u.astype(np.float64), v.astype(np.float64), 1e-6 if dtype == np.float32 else 1e-10)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_step_matches(dtype):
    rng = np.random.default_rng(18)
    p1 = rng.standard_normal((8, 9)).astype(dtype)
    p2 = p1.copy()
    m1 = np.zeros_like(p1)
    v1 = np.zeros_like(p1)
    m2 = np.zeros_like(p1)
    v2 = np.zeros_like(p1)
    for step in range(1, 6):
        g = rng.standard_normal((8, 9)).astype(dtype)
        bc1 = 1.0 - 0.9**step
        bc2 = 1.0 - 0.999**step
        npk.adam_step_core(p1, g, m1, v1, 5e-4, 0.9, 0.999, 1e-8, bc1, bc2)
        ck.adam_step_core(p2, g.copy(), m2, v2, 5e-4, 0.9, 0.999, 1e-8, bc1, bc2)
    rtol = TOLS[dtype]
    _close(p1, p2, rtol)
    _close(m1, m2, rtol)
    _close(v1, v2, rtol)


@needs_compiled
def test_adam_step_rejects_noncontiguous():
    p = np.zeros((6, 6))[:, ::2]
    with pytest.raises(ValueError, match="contiguous"):
        ck.adam_step_core(p, np.zeros((6, 3)), np.zeros((6, 3)), np.zeros((6, 3)),
                          5e-4, 0.9, 0.999, 1e-8, 0.1, 0.001)


def _train_short(backend, monkeypatch):
    import radfield.field as fieldmod
    import radfield.mlp as mlpmod
    import radfield.train as trainmod

    monkeypatch.setattr(fieldmod, "kernels", backend)
    monkeypatch.setattr(mlpmod, "kernels", backend)
    monkeypatch.setattr(trainmod, "kernels", backend)
    scene = make_shoebox((4.0, 3.0, 2.5), MATERIALS["pec"], (0.7, 0.8, 1.1))
    ds = generate_dataset(scene, FrequencyConfig(carrier_hz=2.412e9), 8,
                          train_fraction=0.75, max_order=1, seed=5)
    cfg = TrainConfig(t_far=10.0, batch_size=4, n_coarse=12, n_fine=12,
                      n_iterations=25, seed=9, dtype="float64")
    model, report = train(ds, cfg)
    return np.concatenate([model.fine.flatten(), model.coarse.flatten()]), report


@needs_compiled
def test_short_training_run_matches_across_backends(monkeypatch):
    params_np, rep_np = _train_short(npk, monkeypatch)
    params_c, rep_c = _train_short(ck, monkeypatch)
    # identical draws, so only kernel rounding separates the trajectories
    np.testing.assert_allclose(params_np, params_c, rtol=1e-6, atol=1e-9)
    assert abs(rep_np.final_loss - rep_c.final_loss) < 1e-6
