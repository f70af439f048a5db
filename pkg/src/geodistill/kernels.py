"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``GEODISTILL_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("GEODISTILL_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def farthest_point_sampling(points, count, start):
    points = np.ascontiguousarray(points, dtype=np.float64)
    return _impl.farthest_point_sampling(points, int(count), int(start))


def dijkstra(indptr, indices, weights, source):
    return _impl.dijkstra(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(weights, dtype=np.float64),
        int(source),
    )


def max_pairwise_sqdist(points):
    return _impl.max_pairwise_sqdist(np.ascontiguousarray(points, dtype=np.float64))
