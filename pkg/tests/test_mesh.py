import itertools
import math

import numpy as np
import pytest

from geodistill import _fallback, kernels
from geodistill.mesh import (Mesh, MeshError, build_adjacency, farthest_point_sampling, load_mesh,
                             max_extent, save_mesh)

TRI = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_obj_is_one_indexed(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_face_out_of_range(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n")
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(p)


def test_obj_without_vertices(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("# nothing\n")
    with pytest.raises(MeshError):
        load_mesh(p)


def test_face_repeating_vertex_rejected():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 0, 1]]))


@pytest.mark.parametrize("ext", ["obj", "ply"])
def test_round_trip_is_bit_exact(tmp_path, ico3, ext, rng):
    v = ico3.vertices + rng.normal(0, 1e-3, ico3.vertices.shape)
    m = ico3.with_vertices(v)
    save_mesh(m, tmp_path / f"m.{ext}")
    back = load_mesh(tmp_path / f"m.{ext}")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)
    assert back.colors is None


def test_ply_colors_are_8bit(tmp_path):
    m = TRI.with_colors(np.tile([1.0, 0.0, 0.0], (3, 1)))
    save_mesh(m, tmp_path / "c.ply")
    raw = (tmp_path / "c.ply").read_bytes()
    head, body = raw.split(b"end_header\n", 1)
    assert b"property uchar red" in head and b"property uchar blue" in head
    back = load_mesh(tmp_path / "c.ply")
    assert np.array_equal(back.colors, m.colors)


def test_obj_colors_extended_vertex_line(tmp_path):
    m = TRI.with_colors(np.tile([0.0, 0.5, 1.0], (3, 1)))
    save_mesh(m, tmp_path / "c.obj")
    first = (tmp_path / "c.obj").read_text().splitlines()[0].split()
    assert len(first) == 7
    assert np.array_equal(load_mesh(tmp_path / "c.obj").colors, m.colors)


def test_adjacency_single_triangle():
    adj = build_adjacency(TRI)
    assert len(adj.edges) == 3
    assert all(len(adj.neighbors(i)) == 2 for i in range(3))
    assert sorted(adj.lengths.tolist()) == pytest.approx([1.0, 1.0, math.sqrt(2)])


def test_adjacency_two_triangles():
    m = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]), np.array([[0, 1, 2], [1, 3, 2]]))
    assert len(build_adjacency(m).edges) == 5


def test_adjacency_symmetric_and_unique(ico3):
    adj = build_adjacency(ico3)
    pairs = {tuple(sorted(e)) for e in adj.edges.tolist()}
    assert len(pairs) == len(adj.edges)
    for i in range(ico3.n_vertices):
        for j in adj.neighbors(i):
            assert i in adj.neighbors(j)
    assert np.all(adj.lengths > 0)


def test_adjacency_rejects_zero_length_edge():
    m = Mesh(np.array([[0.0, 0, 0], [0, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(MeshError):
        build_adjacency(m)


def test_fps_collinear():
    pts = np.stack([np.arange(11.0), np.zeros(11), np.zeros(11)], axis=1)
    assert farthest_point_sampling(pts, 3, start=0).tolist() == [0, 10, 5]


def test_fps_full_count_is_permutation(rng):
    pts = rng.normal(size=(50, 3))
    assert sorted(farthest_point_sampling(pts, 50, seed=3).tolist()) == list(range(50))


def test_fps_errors():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 0)
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 5)


def test_fps_deterministic_given_seed(rng):
    pts = rng.normal(size=(100, 3))
    a = farthest_point_sampling(pts, 10, seed=7)
    assert np.array_equal(a, farthest_point_sampling(pts, 10, seed=7))


@pytest.mark.parametrize("impl", [_fallback, kernels], ids=["fallback", "active"])
def test_fps_greedy_property_exhaustive(impl, rng):
    pts = rng.normal(size=(200, 3))
    order = impl.farthest_point_sampling(np.ascontiguousarray(pts), 40, 0)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    for k in range(1, len(order)):
        mind = d[:, order[:k]].min(axis=1)
        assert mind[order[k]] == mind.max()
        # ties go to the lowest index
        assert order[k] == int(np.flatnonzero(mind == mind.max())[0])


def test_max_extent_cube():
    cube = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    assert max_extent(cube) == pytest.approx(math.sqrt(3), abs=1e-15)


def test_max_extent_coincident_points():
    assert max_extent(np.zeros((2, 3))) == 0.0


def test_max_extent_needs_two_points():
    with pytest.raises(ValueError):
        max_extent(np.zeros((1, 3)))


def test_max_extent_matches_brute_force(rng):
    pts = rng.normal(size=(128, 3))
    brute = max(math.dist(p, q) for p, q in itertools.combinations(pts.tolist(), 2))
    assert max_extent(pts) == pytest.approx(brute, rel=1e-15)


def test_backends_agree(ico3):
    adj = build_adjacency(ico3)
    v = np.ascontiguousarray(ico3.vertices)
    args = (adj.indptr.astype(np.int64), adj.indices.astype(np.int64), adj.weights.astype(np.float64), 3)
    assert np.array_equal(_fallback.dijkstra(*args), kernels.dijkstra(*args))
    assert np.array_equal(_fallback.farthest_point_sampling(v, 30, 2), kernels.farthest_point_sampling(v, 30, 2))
    assert _fallback.max_pairwise_sqdist(v) == kernels.max_pairwise_sqdist(v)
