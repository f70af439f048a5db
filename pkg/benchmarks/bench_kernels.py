"""Time the compiled kernels against the numpy fallback on an icosphere.

    python3 benchmarks/bench_kernels.py [--subdivisions 5] [--repeat 3]

Both backends must agree exactly; the script exits nonzero if they do not.
"""

import argparse
import sys
import timeit

import numpy as np

from geodistill import _fallback
from geodistill.mesh import build_adjacency
from geodistill.synth import make_icosphere

try:
    from geodistill import _kernels
except ImportError:
    _kernels = None


def cases(mesh, fps_count):
    adj = build_adjacency(mesh)
    pts = np.ascontiguousarray(mesh.vertices, dtype=np.float64)
    indptr = np.ascontiguousarray(adj.indptr, dtype=np.int64)
    indices = np.ascontiguousarray(adj.indices, dtype=np.int64)
    weights = np.ascontiguousarray(adj.weights, dtype=np.float64)
    return {
        "fps": lambda impl: impl.farthest_point_sampling(pts, fps_count, 0),
        "dijkstra": lambda impl: impl.dijkstra(indptr, indices, weights, 0),
        "max_pairwise": lambda impl: impl.max_pairwise_sqdist(pts),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--subdivisions", type=int, default=5)
    p.add_argument("--fps-count", type=int, default=256)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1

    mesh = make_icosphere(args.subdivisions)
    print(f"icosphere: {mesh.n_vertices} vertices")
    print(f"{'kernel':<14}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    ok = True
    for name, fn in cases(mesh, args.fps_count).items():
        ref, fast = fn(_fallback), fn(_kernels)
        if not np.array_equal(np.asarray(ref), np.asarray(fast)):
            print(f"{name}: backends disagree")
            ok = False
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name:<14}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>9.1f}x")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
