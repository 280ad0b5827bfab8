"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is checked for agreement before timing; the numba variants are
warmed up once so compilation is excluded.
"""

import argparse
from timeit import default_timer as timer

import numpy as np

from snslab import _kernels as K


def best_of(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = timer()
        fn(*args)
        best = min(best, timer() - t0)
    return best


def cases(rng):
    for batch, M in ((1, 66), (64, 66), (16, 130)):
        shape = (batch, M, M)
        a = [rng.standard_normal(shape) for _ in range(4)]
        yield f"advect_product {shape}", K.advect_product_numpy, K.advect_product_numba, tuple(a)
        g = rng.standard_normal((2, M, M))
        for kind, name in ((K.G2_ZERO, "zero"), (K.G2_SATURATING, "saturating")):
            args = (*a, g[0], g[1], kind, 0.5, 2.0)
            yield f"nemytski[{name}] {shape}", K.nemytski_numpy, K.nemytski_numba, args
    for n in (101, 401):
        x = rng.standard_normal((n, 50))
        gram = x @ x.T
        t = np.linspace(0.0, 1.0, n)
        w = np.full(n, 1.0 / (n - 1))
        yield f"time_seminorm n={n}", K.time_seminorm_numpy, K.time_seminorm_numba, (gram, t, w, 0.25, 4.0)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba not importable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for label, f_np, f_nb, a in cases(rng):
        r_np, r_nb = f_np(*a), f_nb(*a)
        np.testing.assert_allclose(np.asarray(r_nb, dtype=float), np.asarray(r_np, dtype=float), rtol=1e-12, atol=1e-12)
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        print(f"{label:42s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
