"""Compare the compiled and numpy exact-EDT backends on random volumes.

    python3 benchmarks/bench_edt.py [--sizes 32 64 96] [--repeats 3]
"""
import argparse
import time

import numpy as np

from dtml.edt import available_backends, squared_edt


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 96])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = available_backends()
    rng = np.random.default_rng(args.seed)
    print(f"{'size':>6} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    for n in args.sizes:
        features = rng.random((n, n, n)) < 0.01
        spacing = (1.0, 1.2, 2.5)
        out, times = {}, {}
        for b in backends:
            out[b] = squared_edt(features, spacing, backend=b)
            times[b] = _time(lambda b=b: squared_edt(features, spacing, backend=b), args.repeats)
        diff = max(float(np.max(np.abs(out[b] - out[backends[0]]))) for b in backends)
        speed = times.get("numpy", np.nan) / times.get("cython", np.nan)
        print(f"{n:>5}^3 " + " ".join(f"{times[b]:>9.4f}s" for b in backends)
              + f"   {speed:7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
