"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Setting TRAJNAV_DISABLE_NUMBA=1 makes the library pick the numpy path by
default; this script always times both explicitly.
"""
import argparse
import time

import numpy as np

from trajnav import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    for n in (8, 32, 128):
        cost = rng.random((n, n))
        yield f"dtw {n}x{n}", lambda c=cost, u=False: kernels.dtw_table(c, u), \
            lambda c=cost: kernels.dtw_table(c, True)
    for n in (25, 100, 200):
        w = np.where(rng.random((n, n)) < 0.1, rng.uniform(1, 3, (n, n)), np.inf)
        w = np.minimum(w, w.T)
        np.fill_diagonal(w, 0.0)
        yield f"floyd-warshall n={n}", lambda x=w: kernels.floyd_warshall(x, False), \
            lambda x=w: kernels.floyd_warshall(x, True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAVE_NUMBA}")
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, slow, fast in cases(rng):
        t_np = best_of(slow, args.repeat)
        if kernels.HAVE_NUMBA:
            fast()  # compile outside the timed region
            assert np.allclose(slow(), fast())
            t_nb = best_of(fast, args.repeat)
            print(f"{name:<24}{t_np * 1e3:12.3f}{t_nb * 1e3:12.3f}{t_np / t_nb:10.1f}")
        else:
            print(f"{name:<24}{t_np * 1e3:12.3f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
