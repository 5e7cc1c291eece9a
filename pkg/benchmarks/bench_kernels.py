"""Time the compiled kernels against their numpy counterparts.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``.  Shapes mirror the
sinusoid workloads: a meta-batch of 5 tasks with up to 100 points each.
"""

import argparse
import timeit

import numpy as np

from pacmeta.autodiff import kernels


def _cases(rng):
    for batch, m in ((1, 5), (5, 30), (5, 100), (1, 400)):
        a = rng.normal(size=(batch, m, 2))
        g = rng.normal(size=(batch, m, m))
        spd = g @ np.swapaxes(g, -1, -2) / m + np.eye(m)
        low = np.linalg.cholesky(spd)
        rhs = rng.normal(size=(batch, m, 3))
        yield f"sqdist    B={batch} m={m}", kernels.sqdist_numba, kernels.sqdist_numpy, (a, a)
        yield f"cholesky  B={batch} m={m}", kernels.cholesky_numba, kernels.cholesky_numpy, (spd,)
        yield (f"solve     B={batch} m={m}", kernels.solve_lower_numba, kernels.solve_lower_numpy,
               (low, rhs))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name, fast, slow, call_args in _cases(rng):
        got, want = fast(*call_args), slow(*call_args)
        for g, w in zip(*((r,) if isinstance(r, np.ndarray) else r for r in (got, want))):
            np.testing.assert_allclose(g, w, rtol=1e-9, atol=1e-12)
        fast(*call_args)  # compile outside the timed region
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=args.repeat, repeat=3))
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=args.repeat, repeat=3))
        us = 1e6 / args.repeat
        print(f"{name:<24}{t_fast * us:>12.1f}{t_slow * us:>12.1f}{t_slow / t_fast:>10.2f}")


if __name__ == "__main__":
    main()
