"""Timings of the hot kernels: NTU metric, ALS truncation and a CTMRG sweep.

Run with ``python benchmarks/bench_kernels.py [--D 2 3 4] [--repeat 5]``.
Every kernel is dominated by dense BLAS/LAPACK calls (tensordot, SVD, eigh),
so the numbers mostly track the linked numpy backend.
"""

import argparse
import time

import numpy as np

from ipeps_ntu.ctmrg import converge
from ipeps_ntu.gates import BOND_SWEEP, ModelParams, quench_gate
from ipeps_ntu.lattice import IpepsState, apply_gate_and_reduce
from ipeps_ntu.truncation import TruncationConfig, als_optimize, ntu_metric


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def random_state(rng, D):
    shape = (2, D, D, D, D)
    a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    b = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return IpepsState(a, b).normalized()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--D", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    gate = quench_gate(ModelParams(hx=3.04438), 0.01)
    print(f"{'D':>3} {'ntu_metric [ms]':>16} {'als [ms]':>10} {'ctm sweep [ms]':>15}")
    for D in args.D:
        state = random_state(rng, D)
        pair = apply_gate_and_reduce(state, gate, BOND_SWEEP[0])
        metric = ntu_metric(state, pair)
        cfg = TruncationConfig("ntu", D)
        t_metric = best_of(lambda: ntu_metric(state, pair), args.repeat)
        t_als = best_of(lambda: als_optimize(pair, metric, cfg), args.repeat)
        chi = 4 * D
        env = converge(state, chi, max_sweeps=2)
        t_ctm = best_of(lambda: converge(state, chi, env=env, max_sweeps=1, min_sweeps=1), args.repeat)
        print(f"{D:>3} {1e3 * t_metric:>16.2f} {1e3 * t_als:>10.2f} {1e3 * t_ctm:>15.2f}")


if __name__ == "__main__":
    main()
