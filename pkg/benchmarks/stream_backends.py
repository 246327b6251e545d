"""Throughput comparison of the stream kernels: compiled extension vs pure Python.

Runs the same stream configuration through both backends, checks the
trajectories agree bitwise, and reports steps/second. Wall times stay in
memory; nothing is written to disk.

Usage: python3 benchmarks/stream_backends.py [T ...]
"""
import sys
import time

import numpy as np

from eqloss.data_io import reference_mixture
from eqloss.models_losses import LossSpec, ParamVector
from eqloss.sampler import HAVE_COMPILED, AlgorithmSpec, run_stream, theta_init
from eqloss.uncertainty import UncertaintySpec


def time_backend(backend: str, T: int) -> tuple[float, np.ndarray]:
    dist = reference_mixture()
    loss = LossSpec("logistic")
    unc = UncertaintySpec("threshold", gamma=1.5)
    theta1 = ParamVector(theta_init(2, 5.0, np.random.default_rng(7)), 5.0)
    alg = AlgorithmSpec("stream", T=T, eta=1e-3, seed=3, backend=backend)
    best = np.inf
    rec = None
    for _ in range(3):
        started = time.perf_counter()
        rec = run_stream(alg, loss, unc, dist, theta1)
        best = min(best, time.perf_counter() - started)
    return best, rec.theta_final


def main(argv: list[str]) -> int:
    sizes = [int(a) for a in argv] or [20_000, 200_000]
    if not HAVE_COMPILED:
        print("compiled kernel unavailable; timing the Python backend only")
    print(f"{'T':>9} {'python s':>10} {'compiled s':>11} {'speedup':>8}  identical")
    for T in sizes:
        t_py, th_py = time_backend("python", T)
        if HAVE_COMPILED:
            t_c, th_c = time_backend("compiled", T)
            same = bool(np.array_equal(th_py, th_c))
            print(f"{T:>9} {t_py:>10.3f} {t_c:>11.3f} {t_py / t_c:>7.1f}x  {same}")
            if not same:
                return 1
        else:
            print(f"{T:>9} {t_py:>10.3f} {'-':>11} {'-':>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
