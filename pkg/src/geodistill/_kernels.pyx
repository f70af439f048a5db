# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_fallback`` bit for bit."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def farthest_point_sampling(const double[:, ::1] points, Py_ssize_t count, Py_ssize_t start):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, k, best
    cdef double dx, dy, dz, d, best_d
    cdef double[::1] mind = np.full(n, INFINITY)
    out = np.empty(count, dtype=np.int64)
    cdef cnp.int64_t[::1] chosen = out
    cdef Py_ssize_t cur = start
    for k in range(count):
        chosen[k] = cur
        best = -1
        best_d = -1.0
        for i in range(n):
            dx = points[i, 0] - points[cur, 0]
            dy = points[i, 1] - points[cur, 1]
            dz = points[i, 2] - points[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best_d:
                best_d = mind[i]
                best = i
        cur = best
    return out


cdef inline void _sift_down(double[::1] hk, cnp.int64_t[::1] hv, Py_ssize_t size, Py_ssize_t pos) nogil:
    cdef Py_ssize_t child
    cdef double k = hk[pos]
    cdef cnp.int64_t v = hv[pos]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and (hk[child + 1] < hk[child] or
                                 (hk[child + 1] == hk[child] and hv[child + 1] < hv[child])):
            child += 1
        if hk[child] < k or (hk[child] == k and hv[child] < v):
            hk[pos] = hk[child]
            hv[pos] = hv[child]
            pos = child
        else:
            break
    hk[pos] = k
    hv[pos] = v


cdef inline void _sift_up(double[::1] hk, cnp.int64_t[::1] hv, Py_ssize_t pos) nogil:
    cdef Py_ssize_t parent
    cdef double k = hk[pos]
    cdef cnp.int64_t v = hv[pos]
    while pos > 0:
        parent = (pos - 1) // 2
        if k < hk[parent] or (k == hk[parent] and v < hv[parent]):
            hk[pos] = hk[parent]
            hv[pos] = hv[parent]
            pos = parent
        else:
            break
    hk[pos] = k
    hv[pos] = v


def dijkstra(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
             const double[::1] weights, Py_ssize_t source):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out = np.full(n, np.inf)
    cdef double[::1] dist = out
    cdef cnp.uint8_t[::1] done = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t cap = indices.shape[0] + 1
    cdef double[::1] hk = np.empty(cap)
    cdef cnp.int64_t[::1] hv = np.empty(cap, dtype=np.int64)
    cdef Py_ssize_t size = 0, u, j, e
    cdef double d, nd
    dist[source] = 0.0
    hk[0] = 0.0
    hv[0] = source
    size = 1
    while size > 0:
        d = hk[0]
        u = hv[0]
        size -= 1
        if size > 0:
            hk[0] = hk[size]
            hv[0] = hv[size]
            _sift_down(hk, hv, size, 0)
        if done[u]:
            continue
        done[u] = 1
        for e in range(indptr[u], indptr[u + 1]):
            j = indices[e]
            nd = d + weights[e]
            if nd < dist[j]:
                dist[j] = nd
                hk[size] = nd
                hv[size] = j
                _sift_up(hk, hv, size)
                size += 1
    return out


def max_pairwise_sqdist(const double[:, ::1] points):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d, best = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d > best:
                best = d
    return best
