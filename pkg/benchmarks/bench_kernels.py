"""Time the compiled and pure-numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--regions 50] [--days 365] [--repeat 5]

The first compiled call (JIT or cache load) is timed separately.
"""
import argparse
import time

import numpy as np

from epicoord import kernels


def _inputs(n_regions, n_days, seed=0):
    rng = np.random.default_rng(seed)
    pop = rng.uniform(1e5, 1e7, n_regions)
    x0 = np.zeros((n_regions, 6))
    x0[:, 2] = pop * 1e-4
    x0[:, 1] = 2 * x0[:, 2]
    x0[:, 0] = pop - x0[:, 1:].sum(axis=1)
    flows = rng.uniform(0, 1e-3, (n_days, n_regions, n_regions)) * pop[None, :, None]
    for t in range(n_days):
        np.fill_diagonal(flows[t], 0.0)
    params = np.broadcast_to(np.array([0.4, 0.1, 0.2, 0.1, 0.1, 0.005]), (n_days, n_regions, 6)).copy()
    screening = np.zeros_like(flows)
    return x0, np.zeros(n_regions), flows, params, screening


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--regions", type=int, default=50)
    ap.add_argument("--days", type=int, default=365)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    sim = _inputs(args.regions, args.days)
    incidence = np.random.default_rng(1).poisson(100, 2000).astype(float)
    weights = np.diff(np.linspace(0, 1, 21)) / 1.0
    shap_values = np.random.default_rng(2).random(1 << 14)

    cases = {
        f"run_days {args.regions}x{args.days}": lambda: kernels.run_days(*sim),
        "renewal n=2000": lambda: kernels.renewal_intensity(incidence, weights),
        "gammaincinv x200": lambda: [kernels.gammaincinv(50.0 + k, 0.975) for k in range(200)],
        "shapley M=14": lambda: kernels.shapley_from_values(shap_values, 14),
    }
    if not kernels.HAVE_NUMBA:
        print("numba not installed; only the numpy backend is available")
    print(f"{'kernel':<26}{'numpy [s]':>12}{'numba [s]':>12}{'first jit [s]':>15}{'speedup':>9}")
    for name, fn in cases.items():
        kernels.set_backend("numpy")
        t_np = _best(fn, args.repeat)
        if kernels.HAVE_NUMBA:
            kernels.set_backend("numba")
            t0 = time.perf_counter()
            fn()
            first = time.perf_counter() - t0
            t_nb = _best(fn, args.repeat)
            print(f"{name:<26}{t_np:>12.5f}{t_nb:>12.5f}{first:>15.3f}{t_np / t_nb:>9.1f}")
        else:
            print(f"{name:<26}{t_np:>12.5f}{'-':>12}{'-':>15}{'-':>9}")
    kernels.set_backend(kernels.default_backend())


if __name__ == "__main__":
    main()
