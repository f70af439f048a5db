"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Each function reproduces the compiled result exactly (same arithmetic,
same tie-breaking), so either backend can be selected at import.
"""

import heapq

import numpy as np


def farthest_point_sampling(points, count, start):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    mind = np.full(n, np.inf)
    out = np.empty(count, dtype=np.int64)
    cur = int(start)
    for k in range(count):
        out[k] = cur
        diff = points - points[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))
    return out


def dijkstra(indptr, indices, weights, source):
    n = len(indptr) - 1
    dist = [np.inf] * n
    done = [False] * n
    dist[source] = 0.0
    heap = [(0.0, int(source))]
    indptr = indptr.tolist()
    indices = indices.tolist()
    weights = weights.tolist()
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for e in range(indptr[u], indptr[u + 1]):
            j = indices[e]
            nd = d + weights[e]
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return np.array(dist, dtype=np.float64)


def max_pairwise_sqdist(points, block=512):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    best = 0.0
    for lo in range(0, n, block):
        a = points[lo:lo + block]
        diff = a[:, None, :] - points[None, :, :]
        d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        best = max(best, float(d.max()))
    return best
