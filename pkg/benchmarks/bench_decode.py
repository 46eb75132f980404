"""Time span decoding with the numba kernels against the pure-numpy path.

    python benchmarks/bench_decode.py [--relations 24] [--length 100] [--spans 200]

Grids are drawn so that a few percent of cells clear the threshold, roughly
what a partly trained model produces. Both paths must return identical
triples; the script checks that before timing.
"""
import argparse
import time

import numpy as np

from bidirte import _kernels


def make_grids(rng, n, r, length, density):
    start = rng.random((n, r, length)) * (rng.random((n, r, length)) < density * 2)
    end = rng.random((n, r, length)) * (rng.random((n, r, length)) < density * 2)
    mask = rng.random((n, r)) < 0.5
    return start, end, mask


def run(fn, grids, theta):
    start, end, mask = grids
    return [fn(start[i], end[i], theta, mask[i]) for i in range(start.shape[0])]


def best_of(fn, grids, theta, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run(fn, grids, theta)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--relations", type=int, default=24)
    ap.add_argument("--length", type=int, default=100)
    ap.add_argument("--spans", type=int, default=200, help="conditioning spans, one grid pair each")
    ap.add_argument("--density", type=float, default=0.05)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    grids = make_grids(rng, args.spans, args.relations, args.length, args.density)
    theta = 0.5
    a = run(_kernels.decode_grid_numpy, grids, theta)
    t0 = time.perf_counter()
    b = run(_kernels.decode_grid_numba, grids, theta)  # includes compilation or cache load
    warmup = time.perf_counter() - t0
    assert all(np.array_equal(x, y) for x, y in zip(a, b)), "numba and numpy disagree"

    t_np = best_of(_kernels.decode_grid_numpy, grids, theta, args.repeat)
    t_nb = best_of(_kernels.decode_grid_numba, grids, theta, args.repeat)
    triples = sum(len(x) for x in a)
    print(f"grids: {args.spans} x {args.relations} x {args.length}, {triples} decoded triples")
    print(f"numpy : {1e3 * t_np:8.2f} ms")
    print(f"numba : {1e3 * t_nb:8.2f} ms  (first call {1e3 * warmup:.0f} ms)")
    print(f"speedup: {t_np / t_nb:.1f}x")


if __name__ == "__main__":
    main()
