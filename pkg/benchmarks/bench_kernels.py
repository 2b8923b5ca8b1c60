"""Compare the compiled and numpy geometry kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall time of each backend per kernel and the speedup.
Outputs of both backends are checked for equality before timing.
"""

import argparse
import timeit

import numpy as np

from west import kernels
from west.geometry import BBox, kmeans_centers, voronoi_partition
from west.mobility import _flatten_regions


def _inputs(rng):
    a = rng.uniform(-10, 10, (200_000, 4))
    b = rng.uniform(-10, 10, (200_000, 4))
    t = rng.uniform(-1, 2, (100_000, 2))
    d = a[:100_000, 2:] - a[:100_000, :2]
    b[:100_000] = np.hstack([a[:100_000, :2] + t[:, :1] * d, a[:100_000, :2] + t[:, 1:] * d])

    box = BBox(0, 0, 100, 100)
    regions = voronoi_partition(kmeans_centers(rng.uniform(0, 100, (5000, 2)), 24, seed=1), box)
    segs = np.ascontiguousarray(np.vstack([r.border_array() for r in regions]))
    owner = np.concatenate([np.full(len(r.vertices), k, dtype=np.int64)
                            for k, r in enumerate(regions)])
    vx, vy, off = _flatten_regions(regions)
    pts = rng.uniform(-5, 105, (500_000, 2))
    px, py = np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1])
    return {
        "segment_overlap_batch (200k pairs)": (
            "segment_overlap_batch", (np.ascontiguousarray(a), np.ascontiguousarray(b), 1e-9)),
        "overlap_matrix_sum (24 regions)": (
            "overlap_matrix_sum", (segs, owner, len(regions), 1e-7)),
        "locate_points (500k points)": (
            "locate_points", (px, py, vx, vy, off, 1e-9)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; only the numpy fallback is available")
    cases = _inputs(np.random.default_rng(0))
    print(f"{'kernel':<38}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for label, (fn, argv) in cases.items():
        results = [getattr(mod, fn)(*argv) for mod in impls.values()]
        for r in results[1:]:
            assert np.array_equal(r, results[0]), f"{fn}: backends disagree"
        times = [min(timeit.repeat(lambda m=mod: getattr(m, fn)(*argv), number=1,
                                   repeat=args.repeat)) for mod in impls.values()]
        row = f"{label:<38}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
