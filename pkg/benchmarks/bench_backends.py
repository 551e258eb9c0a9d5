"""Time the numpy and compiled kernel backends on training-shaped workloads.

Usage: python3 benchmarks/bench_backends.py [repeats]
"""
import sys
import time

import numpy as np

from radfield.backend import get_backend


def _timeit(fn, repeats):
    fn()  # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 7
    backends = {"numpy": get_backend("numpy")}
    try:
        backends["compiled"] = get_backend("compiled")
    except ImportError:
        print("compiled backend not built; timing numpy only")

    rng = np.random.default_rng(0)
    n_rays, n_samples, width = 480, 64, 64
    rows = n_rays * n_samples

    x1 = rng.standard_normal((rows, 63)).astype(np.float32)
    x2 = rng.standard_normal((rows, width)).astype(np.float32)
    w = rng.standard_normal((63 + width, width)).astype(np.float32)
    b = rng.standard_normal(width).astype(np.float32)
    d = rng.standard_normal((rows, width)).astype(np.float32)
    pos = rng.uniform(-1, 1, (rows, 3))
    depths = np.sort(rng.uniform(0.1, 19.0, (n_rays, n_samples)), axis=1)
    sigma = rng.uniform(0, 2, (n_rays, n_samples))
    delta = rng.uniform(0.05, 0.4, (n_rays, n_samples))
    ip = rng.uniform(-1, 1, (n_rays, n_samples)).astype(np.float32)
    qp = rng.uniform(-1, 1, (n_rays, n_samples)).astype(np.float32)
    du = rng.standard_normal(n_rays)
    dv = rng.standard_normal(n_rays)
    param = rng.standard_normal((63 + width) * width).astype(np.float32)
    grad = rng.standard_normal(param.shape).astype(np.float32)

    cases = {}
    for name, k in backends.items():
        act_out = k.linear_forward([x1, x2], w, b, 1)
        trans, alpha, weights = k.compute_weights_core(sigma, delta)
        _, _, amp, cos_p, sin_p = k.render_forward_core(
            depths, weights, ip, qp, 9.9e-3, 50.5, 0.1)
        m = np.zeros_like(param)
        v = np.zeros_like(param)
        cases[name] = {
            "linear_forward": lambda k=k: k.linear_forward([x1, x2], w, b, 1),
            "linear_backward": lambda k=k, a=act_out: k.linear_backward(
                [x1, x2], a, w, d.copy(), 1, {1}),
            "positional_encode": lambda k=k: k.positional_encode_core(
                pos, 10, True, np.float32),
            "compute_weights": lambda k=k: k.compute_weights_core(sigma, delta),
            "render_forward": lambda k=k, ww=weights: k.render_forward_core(
                depths, ww, ip, qp, 9.9e-3, 50.5, 0.1),
            "render_backward": lambda k=k, ww=weights, t=trans, a=alpha: (
                k.render_backward_core(ww, t, a, delta, amp, cos_p, sin_p,
                                       ip, qp, du, dv, np.float32)),
            "adam_step": lambda k=k, m=m, v=v: k.adam_step_core(
                param, grad, m, v, 5e-4, 0.9, 0.999, 1e-8, 0.1, 1e-3),
        }

    names = list(next(iter(cases.values())).keys())
    col = max(len(n) for n in names) + 2
    header = "kernel".ljust(col) + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for fn_name in names:
        times = [_timeit(cases[b][fn_name], repeats) for b in backends]
        line = fn_name.ljust(col) + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2 and times[1] > 0:
            line += f"{times[0] / times[1]:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
