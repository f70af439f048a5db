"""Triangle meshes: validation, OBJ/PLY I/O, edge adjacency, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels


class MeshError(ValueError):
    pass


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertices (N, 3), triangles (M, 3) and optional per-vertex RGB in [0, 1]."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise MeshError(f"vertices must be a non-empty (N, 3) array, got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (M, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(f.max()) if f.max() >= len(v) else int(f.min())
            raise MeshError(f"face index {bad} out of range for {len(v)} vertices")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face repeats a vertex index")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != v.shape:
                raise MeshError(f"colors must be (N, 3), got {c.shape}")
            object.__setattr__(self, "colors", _frozen(c))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.colors)

    def with_colors(self, colors) -> "Mesh":
        return Mesh(self.vertices, self.faces, colors)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (E, 2) pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class AdjacencyIndex:
    """Symmetric edge graph of a mesh in CSR form plus the undirected edge list."""

    edges: np.ndarray
    lengths: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


def build_adjacency(mesh: Mesh) -> AdjacencyIndex:
    edges = mesh.edges()
    v = mesh.vertices
    lengths = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    if np.any(lengths <= 0):
        k = int(np.argmin(lengths))
        raise MeshError(f"zero-length edge between vertices {edges[k, 0]} and {edges[k, 1]}")
    n = mesh.n_vertices
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    w = np.concatenate([lengths, lengths])
    order = np.lexsort((dst, src))
    src, dst, w = src[order], dst[order], w[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    return AdjacencyIndex(
        edges=_frozen(edges), lengths=_frozen(lengths),
        indptr=_frozen(indptr), indices=_frozen(dst), weights=_frozen(w),
    )


def farthest_point_sampling(mesh_or_points, count: int, seed: int = 0,
                            metric: str = "euclidean", start: Optional[int] = None) -> np.ndarray:
    """Greedy max-min selection of ``count`` vertex indices.

    The first index is drawn from ``seed`` unless ``start`` is given; every
    later pick maximizes the minimum Euclidean distance to the picks so far,
    ties going to the lowest index.
    """
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, Mesh) else np.asarray(mesh_or_points)
    n = len(pts)
    if count <= 0:
        raise ValueError("count must be positive")
    if count > n:
        raise ValueError(f"count {count} exceeds number of points {n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    return kernels.farthest_point_sampling(pts, count, start)


def max_extent(mesh_or_points) -> float:
    """Largest Euclidean distance between any two vertices (exact)."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, Mesh) else np.asarray(mesh_or_points)
    if len(pts) < 2:
        raise ValueError("max_extent needs at least two points")
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) > 64:
        # the farthest pair always lies on the hull; restrict the exact scan to it
        try:
            from scipy.spatial import ConvexHull

            pts = pts[ConvexHull(pts).vertices]
        except Exception:
            pass
    return math.sqrt(kernels.max_pairwise_sqdist(pts))


# ---------------------------------------------------------------- file I/O

def load_mesh(path, format: Optional[str] = None) -> Mesh:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "ply":
        return _load_ply(path)
    raise MeshError(f"unknown mesh format {fmt!r}")


def save_mesh(mesh: Mesh, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        _save_obj(mesh, path)
    elif fmt == "ply":
        _save_ply(mesh, path)
    else:
        raise MeshError(f"unknown mesh format {fmt!r}")


def _load_obj(path: Path) -> Mesh:
    verts, cols, faces = [], [], []
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise MeshError(f"{path}: not a text OBJ file") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                nv = len(verts)
                idx = [i - 1 if i > 0 else nv + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if not verts:
        raise MeshError(f"{path}: no vertices")
    if any(len(v) != 3 for v in verts):
        raise MeshError(f"{path}: vertex with fewer than 3 coordinates")
    colors = np.array(cols) if cols and len(cols) == len(verts) else None
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range for {len(verts)} vertices")
    return Mesh(np.array(verts), faces, colors)


def _save_obj(mesh: Mesh, path: Path) -> None:
    lines = []
    if mesh.colors is None:
        for x, y, z in mesh.vertices.tolist():
            lines.append(f"v {x!r} {y!r} {z!r}")
    else:
        for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), mesh.colors.tolist()):
            lines.append(f"v {x!r} {y!r} {z!r} {r!r} {g!r} {b!r}")
    for a, b, c in (mesh.faces + 1).tolist():
        lines.append(f"f {a} {b} {c}")
    path.write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path: Path) -> Mesh:
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None, None))
    if fmt == "ascii":
        return _ply_ascii(path, elements, body)
    if fmt != "binary_little_endian":
        raise MeshError(f"{path}: unsupported PLY format {fmt}")
    pos = 0
    verts = colors = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(kind != "list" for _, kind, _, _ in props):
            dt = np.dtype([(p, "<" + kind) for p, kind, _, _ in props])
            if pos + dt.itemsize * count > len(body):
                raise MeshError(f"{path}: truncated {name} data")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                if {"red", "green", "blue"} <= set(arr.dtype.names):
                    colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1) / 255.0
        else:
            if len(props) != 1:
                raise MeshError(f"{path}: mixed list/scalar element {name} unsupported")
            _, _, ct, it = props[0]
            ct, it = np.dtype("<" + ct), np.dtype("<" + it)
            rows = []
            for _ in range(count):
                if pos + ct.itemsize > len(body):
                    raise MeshError(f"{path}: truncated {name} data")
                k = int(np.frombuffer(body, ct, 1, pos)[0])
                pos += ct.itemsize
                if pos + k * it.itemsize > len(body):
                    raise MeshError(f"{path}: truncated {name} data")
                rows.append(np.frombuffer(body, it, k, pos).astype(np.int64))
                pos += k * it.itemsize
            if name == "face":
                faces = _triangulate(rows)
    if verts is None or len(verts) == 0:
        raise MeshError(f"{path}: no vertices")
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range for {len(verts)} vertices")
    return Mesh(verts, faces, colors)


def _ply_ascii(path, elements, body):
    tokens = body.decode("ascii").split()
    pos = 0
    verts = colors = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if name == "face":
            rows = []
            for _ in range(count):
                k = int(tokens[pos])
                rows.append(np.array([int(t) for t in tokens[pos + 1:pos + 1 + k]]))
                pos += 1 + k
            faces = _triangulate(rows)
        else:
            width = len(props)
            vals = np.array(tokens[pos:pos + width * count], dtype=np.float64).reshape(count, width)
            pos += width * count
            if name == "vertex":
                names = [p[0] for p in props]
                verts = vals[:, [names.index(a) for a in "xyz"]]
                if {"red", "green", "blue"} <= set(names):
                    colors = vals[:, [names.index(a) for a in ("red", "green", "blue")]] / 255.0
    if verts is None or len(verts) == 0:
        raise MeshError(f"{path}: no vertices")
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range for {len(verts)} vertices")
    return Mesh(verts, faces, colors)


def _triangulate(rows):
    tris = [[r[0], r[k], r[k + 1]] for r in rows for k in range(1, len(r) - 1)]
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def _save_ply(mesh: Mesh, path: Path) -> None:
    n, m = mesh.n_vertices, mesh.n_faces
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
            "property double x", "property double y", "property double z"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    head += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    vrec = np.zeros(n, dtype=np.dtype(fields))
    vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
    if mesh.colors is not None:
        c8 = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        vrec["red"], vrec["green"], vrec["blue"] = c8.T
    frec = np.zeros(m, dtype=np.dtype([("k", "u1"), ("i", "<i4", (3,))]))
    frec["k"] = 3
    frec["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(vrec.tobytes())
        fh.write(frec.tobytes())


def connected_components(mesh: Mesh) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as cc

    e = mesh.edges()
    n = mesh.n_vertices
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return cc(g, directed=False)[0]


__all__ = [
    "Mesh", "MeshError", "AdjacencyIndex", "build_adjacency", "farthest_point_sampling",
    "max_extent", "load_mesh", "save_mesh", "connected_components",
]
