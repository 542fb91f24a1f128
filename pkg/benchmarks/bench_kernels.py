"""Numba vs pure-numpy timings for the hot kernels.

Run: python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are imported directly, so the LDLMIX_DISABLE_NUMBA flag does not
matter here. The first numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from ldlmix import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def spd(n, rng):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + np.eye(n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    cases = []
    for b, n in ((1000, 24), (250, 64), (64, 256)):
        x, k, g = rng.standard_normal((b, n, n)), rng.standard_normal((3, 3)), rng.standard_normal((b, n, n))
        cases.append((f"conv3x3 fwd  {b}x{n}x{n}",
                      lambda x=x, k=k: kernels.conv3x3_forward_numpy(x, k, 0.1),
                      lambda x=x, k=k: kernels.conv3x3_forward_numba(x, k, 0.1)))
        cases.append((f"conv3x3 bwd  {b}x{n}x{n}",
                      lambda x=x, k=k, g=g: kernels.conv3x3_backward_numpy(x, k, g),
                      lambda x=x, k=k, g=g: kernels.conv3x3_backward_numba(x, k, g)))
    for n in (28, 64, 128):
        a = spd(n, rng)
        cases.append((f"jacobi eigh  {n}x{n}",
                      lambda a=a: kernels.jacobi_eigh_numpy(a.copy()),
                      lambda a=a: kernels.jacobi_eigh_numba(a.copy())))

    print(f"{'kernel':<26}{'numpy s':>12}{'numba s':>12}{'speedup':>10}")
    for name, f_np, f_nb in cases:
        f_nb()  # compile
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:<26}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
