# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused scalar loops around numpy's BLAS.

Mirrors ``_np_kernels`` function for function; that module is the reference
semantics and the two must agree to float tolerance.  Matrix products
delegate to ``np.matmul`` (the BLAS scipy exports is measurably slower than
numpy's on this class of shapes), while everything around them (bias and
activation epilogues, activation derivatives, reductions, the rendering
recurrences) runs as single fused C passes without temporaries.
"""

import numpy as np

from libc.math cimport cos, exp, expm1, sin, sqrt, sqrtf, tanh

BACKEND_NAME = "compiled"
KERNEL_VERSION = 1

ACT_LINEAR = 0
ACT_RELU = 1
ACT_TANH = 2

ctypedef fused real_t:
    float
    double

DEF PI = 3.14159265358979323846


# ------------------------------------------------------------ linear layers


cdef void _bias_act_inplace(real_t[:, ::1] z, real_t[::1] bias,
                            int act_code) noexcept nogil:
    cdef Py_ssize_t m = z.shape[0]
    cdef Py_ssize_t n = z.shape[1]
    cdef Py_ssize_t i, j
    cdef real_t val
    # the relu branch is data-dependent at ~50%, so keep it branchless
    if act_code == 1:
        for i in range(m):
            for j in range(n):
                val = z[i, j] + bias[j]
                z[i, j] = val if val > 0 else <real_t> 0
    elif act_code == 2:
        for i in range(m):
            for j in range(n):
                z[i, j] = <real_t> tanh(<double> (z[i, j] + bias[j]))
    else:
        for i in range(m):
            for j in range(n):
                z[i, j] = z[i, j] + bias[j]


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
    z = np.ascontiguousarray(z)
    if weight.dtype == np.float32:
        _bias_act_inplace[float](z, bias, act_code)
    else:
        _bias_act_inplace[double](z, bias, act_code)
    return z


cdef void _act_derivative_inplace(real_t[:, ::1] act_out, real_t[:, ::1] d_act,
                                  int act_code) noexcept nogil:
    cdef Py_ssize_t m = d_act.shape[0]
    cdef Py_ssize_t n = d_act.shape[1]
    cdef Py_ssize_t i, j
    cdef real_t a
    # branchless: half the relu outputs are exactly zero on typical data
    if act_code == 1:
        for i in range(m):
            for j in range(n):
                d_act[i, j] = d_act[i, j] if act_out[i, j] > 0 else <real_t> 0
    else:
        for i in range(m):
            for j in range(n):
                a = act_out[i, j]
                d_act[i, j] = d_act[i, j] * (1 - a * a)


cdef _column_sum(real_t[:, ::1] d_act):
    # row-major traversal with per-column double accumulators
    cdef Py_ssize_t m = d_act.shape[0]
    cdef Py_ssize_t n = d_act.shape[1]
    acc_arr = np.zeros(n, dtype=np.float64)
    db_arr = np.empty(n, dtype=np.float32 if real_t is float else np.float64)
    cdef double[::1] acc = acc_arr
    cdef real_t[::1] db = db_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                acc[j] += <double> d_act[i, j]
        for j in range(n):
            db[j] = <real_t> acc[j]
    return db_arr


def linear_backward(x_parts, act_out, weight, d_act, act_code, want_dx):
    """Gradients of one linear+activation layer.

    ``want_dx`` lists the part indices whose input gradient is needed;
    others get None.  ``d_act`` is consumed (modified in place).
    """
    d_act = np.ascontiguousarray(d_act)
    if act_code != ACT_LINEAR:
        if weight.dtype == np.float32:
            _act_derivative_inplace[float](act_out, d_act, act_code)
        else:
            _act_derivative_inplace[double](act_out, d_act, act_code)
    dw = np.empty_like(weight)
    r0 = 0
    dx = [None] * len(x_parts)
    for k, x in enumerate(x_parts):
        r1 = r0 + x.shape[1]
        np.matmul(x.T, d_act, out=dw[r0:r1])
        if k in want_dx:
            dx[k] = d_act @ weight[r0:r1].T
        r0 = r1
    if weight.dtype == np.float32:
        db = _column_sum[float](d_act)
    else:
        db = _column_sum[double](d_act)
    return dw, db, dx


# ---------------------------------------------------------- encoding kernel


def positional_encode_core(x, n_freq, include_input, out_dtype):
    """Sinusoidal features with per-band frequency doubling.

    Same double-angle recurrence as the reference, evaluated per element in
    float64 and cast once at the end.
    """
    x_arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = x_arr
    cdef Py_ssize_t s_count = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    cdef int nf = n_freq
    cdef bint with_input = include_input
    cdef Py_ssize_t c0 = d if with_input else 0
    cdef Py_ssize_t cols = d * (2 * nf + (1 if with_input else 0))
    out_arr = np.empty((s_count, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double ang, s, c, s_new
    with nogil:
        for i in range(s_count):
            for j in range(d):
                if with_input:
                    out[i, j] = xv[i, j]
                ang = PI * xv[i, j]
                s = sin(ang)
                c = cos(ang)
                for k in range(nf):
                    if k > 0:
                        s_new = 2.0 * s * c
                        c = c * c - s * s
                        s = s_new
                    out[i, c0 + 2 * k * d + j] = s
                    out[i, c0 + (2 * k + 1) * d + j] = c
    return out_arr.astype(out_dtype, copy=False)


# ----------------------------------------------------------- render kernels


def compute_weights_core(sigma, delta):
    """Transmittance, opacity, and blend weights per ray (float64).

    T_i is the transmittance before sample i (T_0 = 1), alpha_i =
    1 - exp(-sigma_i delta_i), and w_i = T_i alpha_i.
    """
    sigma_arr = np.ascontiguousarray(sigma, dtype=np.float64)
    delta_arr = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[:, ::1] sv = sigma_arr
    cdef double[:, ::1] dv = delta_arr
    cdef Py_ssize_t r = sv.shape[0]
    cdef Py_ssize_t n = sv.shape[1]
    trans_arr = np.empty((r, n), dtype=np.float64)
    alpha_arr = np.empty((r, n), dtype=np.float64)
    w_arr = np.empty((r, n), dtype=np.float64)
    cdef double[:, ::1] tv = trans_arr
    cdef double[:, ::1] av = alpha_arr
    cdef double[:, ::1] wv = w_arr
    cdef Py_ssize_t i, j
    cdef double cum, tau, t_i, a_i
    with nogil:
        for i in range(r):
            cum = 0.0
            for j in range(n):
                tau = sv[i, j] * dv[i, j]
                if tau < 0.0:
                    tau = 0.0
                t_i = 1.0 if j == 0 else exp(-cum)
                a_i = -expm1(-tau)
                tv[i, j] = t_i
                av[i, j] = a_i
                wv[i, j] = t_i * a_i
                cum += tau
    return trans_arr, alpha_arr, w_arr


def render_forward_core(depths, weights, i_part, q_part,
                        double amp_const, double wavenumber, double d_min):
    """Per-ray complex partial sums plus cached amplitude and phase factors.

    Each sample contributes ``w * a * (I + jQ) * exp(-j * wavenumber * t)``
    with ``a = amp_const / t``; samples closer than ``d_min`` radiate
    nothing (a = 0) but still occlude.
    """
    d_arr = np.ascontiguousarray(depths, dtype=np.float64)
    w_arr = np.ascontiguousarray(weights, dtype=np.float64)
    i_arr = np.ascontiguousarray(i_part, dtype=np.float64)
    q_arr = np.ascontiguousarray(q_part, dtype=np.float64)
    cdef double[:, ::1] dv = d_arr
    cdef double[:, ::1] wv = w_arr
    cdef double[:, ::1] iv = i_arr
    cdef double[:, ::1] qv = q_arr
    cdef Py_ssize_t r = dv.shape[0]
    cdef Py_ssize_t n = dv.shape[1]
    g_re_arr = np.empty(r, dtype=np.float64)
    g_im_arr = np.empty(r, dtype=np.float64)
    amp_arr = np.empty((r, n), dtype=np.float64)
    cos_arr = np.empty((r, n), dtype=np.float64)
    sin_arr = np.empty((r, n), dtype=np.float64)
    cdef double[::1] g_re = g_re_arr
    cdef double[::1] g_im = g_im_arr
    cdef double[:, ::1] am = amp_arr
    cdef double[:, ::1] cp = cos_arr
    cdef double[:, ::1] sp = sin_arr
    cdef Py_ssize_t i, j
    cdef double t, a, ph, c, s, wa, acc_re, acc_im
    with nogil:
        for i in range(r):
            acc_re = 0.0
            acc_im = 0.0
            for j in range(n):
                t = dv[i, j]
                a = amp_const / t if t >= d_min else 0.0
                ph = -wavenumber * t
                c = cos(ph)
                s = sin(ph)
                am[i, j] = a
                cp[i, j] = c
                sp[i, j] = s
                wa = wv[i, j] * a
                acc_re += wa * (iv[i, j] * c - qv[i, j] * s)
                acc_im += wa * (iv[i, j] * s + qv[i, j] * c)
            g_re[i] = acc_re
            g_im[i] = acc_im
    return g_re_arr, g_im_arr, amp_arr, cos_arr, sin_arr


cdef _render_backward_impl(double[:, ::1] wv, double[:, ::1] tv,
                           double[:, ::1] av, double[:, ::1] dlv,
                           double[:, ::1] am, double[:, ::1] cp,
                           double[:, ::1] sp, double[:, ::1] iv,
                           double[:, ::1] qv, double[::1] du,
                           double[::1] dvr, real_t typed_zero):
    cdef Py_ssize_t r = wv.shape[0]
    cdef Py_ssize_t n = wv.shape[1]
    dtype = np.float32 if real_t is float else np.float64
    di_arr = np.empty((r, n), dtype=dtype)
    dq_arr = np.empty((r, n), dtype=dtype)
    ds_arr = np.empty((r, n), dtype=dtype)
    cdef real_t[:, ::1] di = di_arr
    cdef real_t[:, ::1] dq = dq_arr
    cdef real_t[:, ::1] ds = ds_arr
    dw_row = np.empty(n, dtype=np.float64)
    dww_row = np.empty(n, dtype=np.float64)
    cdef double[::1] dwr = dw_row
    cdef double[::1] dww = dww_row
    cdef Py_ssize_t i, j
    cdef double u, v, wa, dwj, acc
    with nogil:
        for i in range(r):
            u = du[i]
            v = dvr[i]
            for j in range(n):
                wa = wv[i, j] * am[i, j]
                di[i, j] = <real_t> (wa * (u * cp[i, j] + v * sp[i, j]))
                dq[i, j] = <real_t> (wa * (v * cp[i, j] - u * sp[i, j]))
                dwj = am[i, j] * (
                    u * (iv[i, j] * cp[i, j] - qv[i, j] * sp[i, j])
                    + v * (iv[i, j] * sp[i, j] + qv[i, j] * cp[i, j])
                )
                dwr[j] = dwj
                dww[j] = dwj * wv[i, j]
            # dL/dsigma_j = delta_j (dw_j T_j (1-alpha_j) - sum_{i>j} dw_i w_i)
            acc = 0.0
            for j in range(n - 1, -1, -1):
                ds[i, j] = <real_t> (dlv[i, j] * (
                    dwr[j] * tv[i, j] * (1.0 - av[i, j]) - acc))
                acc += dww[j]
    return di_arr, dq_arr, ds_arr


def render_backward_core(weights, transmittance, alpha, delta, amp, cos_p,
                         sin_p, i_part, q_part, du_ray, dv_ray, out_dtype):
    """Per-sample gradients (dI, dQ, dsigma) of the rendered sums.

    ``du_ray``/``dv_ray`` are dL/d(g_re), dL/d(g_im) per ray.  The sigma
    gradient folds the transmittance chain: a sample's density shades every
    later sample on its ray.
    """
    args = (
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(transmittance, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(delta, dtype=np.float64),
        np.ascontiguousarray(amp, dtype=np.float64),
        np.ascontiguousarray(cos_p, dtype=np.float64),
        np.ascontiguousarray(sin_p, dtype=np.float64),
        np.ascontiguousarray(i_part, dtype=np.float64),
        np.ascontiguousarray(q_part, dtype=np.float64),
        np.ascontiguousarray(du_ray, dtype=np.float64),
        np.ascontiguousarray(dv_ray, dtype=np.float64),
    )
    if np.dtype(out_dtype) == np.float32:
        return _render_backward_impl[float](*args, <float> 0.0)
    return _render_backward_impl[double](*args, <double> 0.0)


# ----------------------------------------------------------------- optimizer


cdef void _adam_step_impl(real_t[::1] param, real_t[::1] grad, real_t[::1] m,
                          real_t[::1] v, double lr, double beta1, double beta2,
                          double eps, double bc1, double bc2) noexcept nogil:
    # arithmetic stays in the parameter precision, like the reference
    cdef real_t b1 = <real_t> beta1
    cdef real_t b2 = <real_t> beta2
    cdef real_t one_m_b1 = <real_t> (1.0 - beta1)
    cdef real_t one_m_b2 = <real_t> (1.0 - beta2)
    cdef real_t bc2r = <real_t> bc2
    cdef real_t epsr = <real_t> eps
    cdef real_t scale = <real_t> (lr / bc1)
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef real_t g, mi, vi, denom
    for i in range(n):
        g = grad[i]
        mi = b1 * m[i] + one_m_b1 * g
        vi = b2 * v[i] + one_m_b2 * g * g
        m[i] = mi
        v[i] = vi
        if real_t is float:
            denom = sqrtf(vi / bc2r) + epsr
        else:
            denom = sqrt(vi / bc2r) + epsr
        param[i] = param[i] - scale * mi / denom


def adam_step_core(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One fused Adam update, in place on param/m/v.

    ``bc1``/``bc2`` are the bias corrections ``1 - beta^t`` for this step.
    The epsilon sits outside the square root of the corrected second moment.
    """
    for name, arr in (("param", param), ("m", m), ("v", v)):
        if not arr.flags["C_CONTIGUOUS"]:
            raise ValueError(f"adam_step_core needs C-contiguous {name}")
    p = param.reshape(-1)
    g = np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1)
    mm = m.reshape(-1)
    vv = v.reshape(-1)
    if param.dtype == np.float32:
        _adam_step_impl[float](p, g, mm, vv, lr, beta1, beta2, eps, bc1, bc2)
    else:
        _adam_step_impl[double](p, g, mm, vv, lr, beta1, beta2, eps, bc1, bc2)
