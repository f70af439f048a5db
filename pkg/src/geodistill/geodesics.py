"""Geodesic distance fields from anchor vertices.

The heat method (diffuse, normalize the gradient, integrate back) gives
smooth on-surface distances; Dijkstra over mesh edges is the exact
edge-graph oracle used to validate it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .mesh import AdjacencyIndex, Mesh, MeshError, connected_components

COT_MIN = 1e-8


class GeodesicError(ValueError):
    pass


@dataclass
class GeodesicField:
    anchors: np.ndarray
    distances: np.ndarray  # (N, A), model units
    rescaled: Optional[np.ndarray] = None  # (N, A) in [0, 1]


def cotan_laplacian(vertices, faces):
    """Positive semi-definite cotangent stiffness matrix and lumped mass diagonal."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    n = len(v)
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    dbl_area = np.linalg.norm(cross, axis=1)
    if np.any(dbl_area <= 1e-300):
        raise GeodesicError(f"degenerate (zero-area) face {int(np.argmin(dbl_area))}")
    cots = _face_cotangents(v, f, dbl_area)
    # cot at corner k weighs the opposite edge (k+1, k+2)
    i = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])
    W = sp.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    W = W + W.T
    W.data = np.maximum(W.data, COT_MIN)
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    mass = np.zeros(n)
    np.add.at(mass, f.ravel(), np.repeat(dbl_area / 6.0, 3))
    return L.tocsc(), mass


def _face_cotangents(v, f, dbl_area):
    out = np.empty((len(f), 3))
    for k in range(3):
        a = v[f[:, k]]
        b = v[f[:, (k + 1) % 3]]
        c = v[f[:, (k + 2) % 3]]
        u, w = b - a, c - a
        out[:, k] = np.einsum("ij,ij->i", u, w) / dbl_area
    return out


class HeatGeodesicSolver:
    """Heat-method distances with factorizations shared across anchors.

    Columns are cached per anchor, so repeated anchors cost nothing.
    """

    def __init__(self, mesh: Mesh, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        if mesh.n_vertices < 3 or mesh.n_faces < 1:
            raise GeodesicError("geodesics need at least 3 vertices and 1 face")
        if connected_components(mesh) != 1:
            raise GeodesicError("mesh is not edge-connected; geodesic distance is undefined across components")
        used = np.zeros(mesh.n_vertices, dtype=bool)
        used[mesh.faces.ravel()] = True
        if not used.all():
            raise GeodesicError(f"vertex {int(np.argmin(used))} belongs to no face")
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        self.L, self.mass = cotan_laplacian(v, f)
        edges = mesh.edges()
        h = float(np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1).mean())
        self.t = time_scale * h * h
        self._heat = splu((sp.diags(self.mass) + self.t * self.L).tocsc())
        # ground vertex 0 so the Poisson operator is SPD; columns are shifted afterwards
        self._poisson = splu(self.L[1:, 1:].tocsc())
        p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        self._dbl_area = np.linalg.norm(cross, axis=1)
        self._normal = cross / self._dbl_area[:, None]
        self._cot = _face_cotangents(v, f, self._dbl_area)
        self._cache: dict[int, np.ndarray] = {}

    @property
    def n_vertices(self):
        return self.mesh.n_vertices

    def _gradient(self, u):
        # per-face gradient of a piecewise-linear function, stacked over columns
        v, f = self.mesh.vertices, self.mesh.faces
        g = 0.0
        for k in range(3):
            e = v[f[:, (k + 2) % 3]] - v[f[:, (k + 1) % 3]]
            g = g + np.cross(self._normal, e)[:, :, None] * u[f[:, k]][:, None, :]
        return g / self._dbl_area[:, None, None]

    def _divergence(self, X):
        v, f = self.mesh.vertices, self.mesh.faces
        n = self.n_vertices
        div = np.zeros((n, X.shape[2]))
        for k in range(3):
            a = v[f[:, k]]
            e1 = v[f[:, (k + 1) % 3]] - a
            e2 = v[f[:, (k + 2) % 3]] - a
            # cot of the angle opposite e1 is at corner k+2, opposite e2 at corner k+1
            c1 = self._cot[:, (k + 2) % 3][:, None]
            c2 = self._cot[:, (k + 1) % 3][:, None]
            contrib = 0.5 * (c1 * np.einsum("fi,fic->fc", e1, X) + c2 * np.einsum("fi,fic->fc", e2, X))
            np.add.at(div, f[:, k], contrib)
        return div

    def _solve(self, anchors):
        n = self.n_vertices
        rhs = np.zeros((n, len(anchors)))
        rhs[anchors, np.arange(len(anchors))] = 1.0
        u = self._heat.solve(rhs)
        grad = self._gradient(u)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        X = -np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        div = self._divergence(X)
        potential = np.zeros((n, len(anchors)))
        potential[1:] = self._poisson.solve(-div[1:])
        potential -= potential[anchors, np.arange(len(anchors))][None, :]
        if not np.all(np.isfinite(potential)):
            raise GeodesicError("singular linear system (degenerate geometry)")
        return np.maximum(potential, 0.0)

    def distances(self, anchors) -> np.ndarray:
        anchors = np.asarray(anchors, dtype=np.int64).ravel()
        if anchors.size == 0:
            raise ValueError("anchors must be non-empty")
        if anchors.min() < 0 or anchors.max() >= self.n_vertices:
            raise ValueError("anchor index out of range")
        missing = [a for a in dict.fromkeys(anchors.tolist()) if a not in self._cache]
        if missing:
            cols = self._solve(np.array(missing))
            for k, a in enumerate(missing):
                self._cache[a] = cols[:, k]
        return np.stack([self._cache[a] for a in anchors.tolist()], axis=1)


def heat_geodesic(mesh: Mesh, anchors, time_scale: float = 1.0,
                  solver: Optional[HeatGeodesicSolver] = None) -> GeodesicField:
    solver = solver or HeatGeodesicSolver(mesh, time_scale)
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    return GeodesicField(anchors=anchors, distances=solver.distances(anchors))


def dijkstra_geodesic(adjacency: AdjacencyIndex, anchors) -> GeodesicField:
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    if anchors.size == 0:
        raise ValueError("anchors must be non-empty")
    n = adjacency.n_vertices
    if anchors.min() < 0 or anchors.max() >= n:
        raise ValueError("anchor index out of range")
    cols = [kernels.dijkstra(adjacency.indptr, adjacency.indices, adjacency.weights, a) for a in anchors]
    d = np.stack(cols, axis=1)
    if not np.all(np.isfinite(d)):
        raise GeodesicError(f"graph is disconnected: vertex {int(np.argwhere(~np.isfinite(d))[0, 0])} unreachable")
    return GeodesicField(anchors=anchors, distances=d)


def rescale_distances(field: GeodesicField) -> GeodesicField:
    d = np.asarray(field.distances)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    top = d.max()
    if not top > 0:
        raise GeodesicError("all distances are zero; cannot rescale")
    return GeodesicField(anchors=field.anchors, distances=d, rescaled=d / top)


__all__ = [
    "GeodesicField", "GeodesicError", "HeatGeodesicSolver", "heat_geodesic",
    "dijkstra_geodesic", "rescale_distances", "cotan_laplacian", "MeshError",
]
