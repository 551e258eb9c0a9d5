"""Pure-numpy implementations of the hot-path kernels.

Fallback backend: the compiled extension in ``_kernels.pyx`` implements the
same functions with fused loops and direct BLAS calls.  Both backends must
agree to float tolerance; :mod:`radfield.backend` picks one at import time.

Conventions: matrices are C-contiguous, activations float32 or float64,
geometry/rendering always float64.  Activation codes: 0 linear, 1 relu,
2 tanh.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"

ACT_LINEAR, ACT_RELU, ACT_TANH = 0, 1, 2


def linear_forward(x_parts, weight, bias, act_code):
    """A = act(concat(x_parts) @ weight + bias) without materializing the concat."""
    r0 = 0
    z = None
    for x in x_parts:
        r1 = r0 + x.shape[1]
        if z is None:
            z = x @ weight[r0:r1]
        else:
            z += x @ weight[r0:r1]
        r0 = r1
    z += bias
    if act_code == ACT_RELU:
        np.maximum(z, 0, out=z)
    elif act_code == ACT_TANH:
        np.tanh(z, out=z)
    return z


def linear_backward(x_parts, act_out, weight, d_act, act_code, want_dx):
    """Gradients of one linear+activation layer.

    ``want_dx`` lists the part indices whose input gradient is needed;
    others get None.  ``d_act`` is consumed (modified in place).
    """
    if act_code == ACT_RELU:
        d_act *= act_out > 0
    elif act_code == ACT_TANH:
        d_act *= 1.0 - act_out * act_out
    dw = np.empty_like(weight)
    r0 = 0
    dx = [None] * len(x_parts)
    for k, x in enumerate(x_parts):
        r1 = r0 + x.shape[1]
        np.matmul(x.T, d_act, out=dw[r0:r1])
        if k in want_dx:
            dx[k] = d_act @ weight[r0:r1].T
        r0 = r1
    db = d_act.sum(axis=0)
    return dw, db, dx


def positional_encode_core(x, n_freq, include_input, out_dtype):
    """Sinusoidal features [x, sin(pi x), cos(pi x), ..., sin(2^{n-1} pi x), ...].

    Frequencies double per band; computed by the double-angle recurrence in
    float64 and cast once at the end.  ``x`` is (S, d); output columns group
    by band, each band contributing d sin then d cos columns.
    """
    x = np.asarray(x, dtype=np.float64)
    s_count, d = x.shape
    cols = d * (2 * n_freq + (1 if include_input else 0))
    out = np.empty((s_count, cols), dtype=np.float64)
    c0 = 0
    if include_input:
        out[:, :d] = x
        c0 = d
    ang = np.pi * x
    s = np.sin(ang)
    c = np.cos(ang)
    for k in range(n_freq):
        if k > 0:
            s, c = 2.0 * s * c, c * c - s * s
        out[:, c0 + 2 * k * d : c0 + (2 * k + 1) * d] = s
        out[:, c0 + (2 * k + 1) * d : c0 + (2 * k + 2) * d] = c
    return out.astype(out_dtype, copy=False)


def compute_weights_core(sigma, delta):
    """Transmittance, opacity, and blend weights per ray.

    ``sigma`` and ``delta`` are (R, N) float64.  T_i is the transmittance
    *before* sample i (T_0 = 1), alpha_i = 1 - exp(-sigma_i delta_i), and
    w_i = T_i alpha_i.
    """
    tau = sigma * delta
    np.maximum(tau, 0.0, out=tau)
    cum = np.cumsum(tau, axis=1)
    transmittance = np.empty_like(tau)
    transmittance[:, 0] = 1.0
    np.exp(-cum[:, :-1], out=transmittance[:, 1:])
    alpha = -np.expm1(-tau)
    weights = transmittance * alpha
    return transmittance, alpha, weights


def render_forward_core(depths, weights, i_part, q_part, amp_const, wavenumber, d_min):
    """Per-ray complex partial sums of the radiation field rendering.

    Each sample contributes ``w * a * (I + jQ) * exp(-j * wavenumber * t)``
    with ``a = amp_const / t``; samples closer than ``d_min`` radiate
    nothing (a = 0) but still occlude.  Returns (g_re, g_im) per ray plus
    the cached per-sample amplitude and phase factors for backward.
    """
    amp = np.where(depths >= d_min, amp_const / np.maximum(depths, d_min), 0.0)
    phase = -wavenumber * depths
    cos_p = np.cos(phase)
    sin_p = np.sin(phase)
    i64 = i_part.astype(np.float64, copy=False)
    q64 = q_part.astype(np.float64, copy=False)
    wa = weights * amp
    g_re = (wa * (i64 * cos_p - q64 * sin_p)).sum(axis=1)
    g_im = (wa * (i64 * sin_p + q64 * cos_p)).sum(axis=1)
    return g_re, g_im, amp, cos_p, sin_p


def render_backward_core(
    weights,
    transmittance,
    alpha,
    delta,
    amp,
    cos_p,
    sin_p,
    i_part,
    q_part,
    du_ray,
    dv_ray,
    out_dtype,
):
    """Gradients of the rendered sums w.r.t. I, Q, and sigma per sample.

    ``du_ray``/``dv_ray`` are dL/d(g_re), dL/d(g_im) per ray.  The sigma
    gradient folds the transmittance chain: a sample's density shades every
    later sample on its ray.
    """
    u = du_ray[:, None]
    v = dv_ray[:, None]
    i64 = i_part.astype(np.float64, copy=False)
    q64 = q_part.astype(np.float64, copy=False)
    wa = weights * amp
    di = wa * (u * cos_p + v * sin_p)
    dq = wa * (v * cos_p - u * sin_p)
    dw = amp * (u * (i64 * cos_p - q64 * sin_p) + v * (i64 * sin_p + q64 * cos_p))
    # dL/dsigma_j = delta_j * (dw_j T_j (1-alpha_j) - sum_{i>j} dw_i w_i)
    dww = dw * weights
    tail = np.cumsum(dww[:, ::-1], axis=1)[:, ::-1] - dww
    dsigma = delta * (dw * transmittance * (1.0 - alpha) - tail)
    return (
        di.astype(out_dtype, copy=False),
        dq.astype(out_dtype, copy=False),
        dsigma.astype(out_dtype, copy=False),
    )


def adam_step_core(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One fused Adam update, in place on param/m/v.

    ``bc1``/``bc2`` are the bias corrections ``1 - beta^t`` for this step.
    The epsilon sits outside the square root of the corrected second moment.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    denom = np.sqrt(v / bc2)
    denom += eps
    param -= (lr / bc1) * m / denom
