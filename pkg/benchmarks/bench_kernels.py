"""Compare the numba and numpy kernel paths on the four hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is warmed up once (the numba path compiles or loads its cache),
then timed; outputs agree to round-off and the script checks that too.
"""
import argparse
import time

import numpy as np

from elliptic_continuation._kernels import numba_kernels, numpy_kernels
from elliptic_continuation.catalog import Sine
from elliptic_continuation.grid import make_grid
from elliptic_continuation.mollifier import deep_interior, make_kernel
from elliptic_continuation.operators import CoefficientField


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    for dim, n in ((2, 127), (2, 255), (3, 31)):
        g = make_grid(dim, n)
        u = rng.standard_normal(g.shape)
        c = CoefficientField.from_functions(g, {(0, 0): Sine(1, 0.5, 1, 0), (0, 1): 0.2}, 1.0)
        faces = c.a_faces
        mixed = c.mixed
        yield f"laplacian {g.ident}", lambda k, u=u, g=g: k.laplacian(u, g.h)
        yield f"div_form {g.ident}", lambda k, u=u, g=g, f=faces, m=mixed, q=c.q: k.div_form(u, f, m, q, g.h)

        def cg(k, u=u, g=g):
            x = np.zeros(g.shape)
            k.cg_laplacian(u, x, g.h, 1e-10, 20 * g.n_per_axis * g.dim)
            return x

        yield f"cg_laplacian {g.ident}", cg
        kern = make_kernel(g, 0.1)
        mask = deep_interior(g, 0.1)
        w = kern.weights * g.cell_volume
        yield f"correlate eps=0.1 {g.ident}", lambda k, u=u, w=w, m=mask: k.correlate_masked(u, w, m)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args()
    if numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(rng):
        a = fn(numpy_kernels)
        b = fn(numba_kernels)
        diff = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
        t_np = best_of(lambda: fn(numpy_kernels), args.repeat)
        t_nb = best_of(lambda: fn(numba_kernels), args.repeat)
        print(f"{name:32s} {1e3 * t_np:12.3f} {1e3 * t_nb:12.3f} {t_np / t_nb:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
