"""Time each kernel's numba loop against its numpy twin.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

The numba column is omitted when numba is not installed.
"""
import argparse
import timeit

import numpy as np

from satcalc import kernels
from satcalc._accel import HAVE_NUMBA


def cases(n, rng):
    a, b, c = (rng.uniform(0, 1, n) for _ in range(3))
    valid = rng.random(n) > 0.05
    side = int(np.sqrt(n))
    img = rng.uniform(0, 1, (side, side))
    img_valid = rng.random((side, side)) > 0.01
    lattice = rng.normal(size=(side // 16 + 2, side // 16 + 2))
    p, g, m, v = (rng.normal(size=n) for _ in range(4))
    v = np.abs(v)
    return {
        "normalized_difference": lambda f: f(a, b, valid, 1e-8),
        "savi": lambda f: f(a, b, valid, 0.5, 1e-8),
        "evi": lambda f: f(a, b, c, valid, 2.5, 6.0, 7.5, 1.0, 1e-8),
        "bilinear": lambda f: f(img, img_valid, 2 * side, 2 * side),
        "lattice_interp": lambda f: f(lattice, side, side, 16),
        # copies keep repeated runs on the same inputs
        "adam_update": lambda f: f(p.copy(), g, m.copy(), v.copy(), 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001, 0.1, 0.001),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"n={args.n}  best of {args.repeat}")
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(args.n, rng).items():
        f_np = getattr(kernels, name + "_np")
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=args.repeat)) * 1e3
        if HAVE_NUMBA:
            f_nb = getattr(kernels, name + "_nb")
            call(f_nb)  # compile outside the timing
            t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<24}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<24}{t_np:>10.2f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
