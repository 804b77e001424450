"""Compare the compiled and pure-Python propagation kernels.

Usage::

    python benchmarks/bench_kernels.py [--steps 500] [--repeat 3]
"""
import argparse
import time

import numpy as np

from collapsar import _backend
from collapsar.kernels import CosineSum, factorize
from collapsar.markov import CollapseSystem
from collapsar.noise import Grid
from collapsar.nonmarkov import LinearPropagator, sample_noises
from collapsar.qcore import SIGMA_X, SIGMA_Z


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--batch", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    md = factorize(CosineSum([np.eye(1)], [2.0]))
    sys = CollapseSystem(SIGMA_X, [SIGMA_Z], 1.0)
    grid = Grid(0.002, args.steps)
    psi0 = np.array([0.6, 0.8], dtype=complex)
    noises = sample_noises(md, grid, 0, args.batch)
    names = ["python"] + (["cython"] if _backend.compiled is not None else [])
    results = {}
    for name in names:
        prop = LinearPropagator(sys, md, grid, backend=name)
        results[name] = {
            "linear sweep": best_of(lambda: prop.sweep(noises[0], psi0), args.repeat),
            f"batch x{args.batch}": best_of(lambda: prop.batch(noises, psi0, [grid.steps]), args.repeat),
            "nonlinear trajectory": best_of(lambda: prop.nonlinear(noises[0], psi0), args.repeat),
        }
    print(f"grid: {args.steps} steps, active backend: {_backend.NAME}")
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for task in results["python"]:
        row = f"{task:<24}" + "".join(f"{results[n][task]:>11.4f}s" for n in names)
        if len(names) == 2:
            row += f"{results['python'][task] / results['cython'][task]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
