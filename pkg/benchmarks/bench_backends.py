"""Compare the numba and numpy kernel paths on classical WMMSE.

The per-node bisection inside the beamformer update dominates WMMSE run
time, so this times full WMMSE(100) solves (no early exit) and checks that
both paths return the same beamformers.

    python3 benchmarks/bench_backends.py --samples 20 --M 10
"""

import argparse
import time

import numpy as np

from uwmmse import _backend
from uwmmse.channel import ChannelSource, NetworkConfig
from uwmmse.wmmse import SolverOptions, run_wmmse


def time_backend(name, data, net, opts):
    with _backend.backend(name):
        run_wmmse(data[0], net.sigma, net.Pmax, opts)  # warm-up (JIT compile for numba)
        times, outs = [], []
        for H in data:
            t0 = time.perf_counter()
            outs.append(run_wmmse(H, net.sigma, net.Pmax, opts).V)
            times.append(time.perf_counter() - t0)
    return np.array(times), outs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--M", type=int, default=10)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = NetworkConfig(M=args.M)
    data = ChannelSource(net, seed=args.seed).draw(args.samples, "benchmark")
    opts = SolverOptions(max_iters=args.iters, early_exit=False)

    results = {}
    for name in ("numba", "numpy"):
        if name == "numba" and not _backend.HAVE_NUMBA:
            print("numba not installed; skipping")
            continue
        results[name] = time_backend(name, data, net, opts)

    print(f"WMMSE({args.iters}) on {args.samples} samples, M={args.M}")
    for name, (times, _) in results.items():
        print(f"  {name:6s} {times.mean() * 1e3:9.2f} ms/sample  (std {times.std() * 1e3:.2f} ms)")
    if len(results) == 2:
        t_nb, v_nb = results["numba"]
        t_np, v_np = results["numpy"]
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(v_nb, v_np))
        print(f"  speed-up {t_np.mean() / t_nb.mean():.1f}x, max |V_numba - V_numpy| = {diff:.2e}")


if __name__ == "__main__":
    main()
