"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from apusim import kernels
from apusim.scheduler import RoutingDemand, _regular_padding


def cases(rng):
    w = rng.integers(-8, 8, (400, 400))
    x = rng.integers(-8, 8, 400)
    acc = rng.integers(-2**20, 2**20, 100_000)
    demand_counts = RoutingDemand(10, 10, ((s, (s + k) % 10, k) for s in range(10)
                                           for k in range(400))).counts()
    dummy = _regular_padding(demand_counts, 400)
    return {
        "tree_sum_rows 4096x400": lambda k: k.tree_sum_rows(w[np.arange(4096) % 400] * x, 8),
        "tree_matvec 400x400": lambda k: k.tree_matvec(w, x, 8),
        "temporal_matvec 400x400": lambda k: k.temporal_matvec(w, x, 17),
        "requantize 1e5": lambda k: k.requantize(acc, 5_000_000, 30, -8, 7),
        "match_cycles 10x10 L=400": lambda k: k.match_cycles(demand_counts, dummy, 400),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = {m.BACKEND: m for m in kernels.backends()}
    rng = np.random.default_rng(0)
    names = list(mods)
    print(f"{'kernel':28s}" + "".join(f"{n:>14s}" for n in names) + "   speedup")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in mods.items():
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:12.2f}ms" for n in names)
        if len(names) > 1:
            row += f"   {times[names[0]] / times[names[-1]]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
