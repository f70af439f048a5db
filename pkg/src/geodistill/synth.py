"""Deterministic synthetic shapes, ambiguous base features and ground truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .mesh import Mesh


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected onto a sphere (10 * 4**k + 2 vertices)."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(v) * radius, np.array(faces))


# ---------------------------------------------------------------- quadruped

@dataclass(frozen=True)
class QuadrupedSpec:
    """Proportions and resolution of a synthetic four-legged shape.

    Axes: x lateral (left is +x), y longitudinal (head is +y), z up.
    Shapes with the same resolution share connectivity, so vertex ``i`` of
    one shape corresponds to vertex ``i`` of any other.
    """

    body_length: float = 2.0
    body_radius: float = 0.35
    leg_length: float = 0.9
    leg_radius: float = 0.1
    head_scale: float = 1.25
    rings: int = 24
    segments: int = 24
    leg_rings: int = 8
    patch: int = 3

    def __post_init__(self):
        if min(self.body_length, self.body_radius, self.leg_length, self.leg_radius) <= 0:
            raise ValueError("degenerate quadruped dimensions")
        if self.segments % 4 or self.segments < 12:
            raise ValueError("segments must be a multiple of 4 and >= 12")
        if self.patch < 2 or self.rings < 4 * self.patch or self.leg_rings < 2:
            raise ValueError("resolution too low for the leg patches")
        if self.leg_radius >= self.body_radius:
            raise ValueError("legs must be thinner than the body")


@dataclass
class MirrorMap:
    """Left/right vertex involution; ``side`` is +1 left, -1 right, 0 centre."""

    mirror: np.ndarray
    side: np.ndarray
    part: np.ndarray  # 0 body, 1..4 legs (front-left, front-right, back-left, back-right)

    LEG_NAMES = ("body", "front_left", "front_right", "back_left", "back_right")

    def is_limb(self):
        return self.part > 0


@dataclass
class Skeleton:
    """Bone tree (bone 0 is the root) with rest heads and skinning weights."""

    parents: np.ndarray
    heads: np.ndarray
    weights: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        b = len(self.parents)
        if b < 1 or self.parents[0] != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        for k in range(1, b):
            if not 0 <= self.parents[k] < k:
                raise ValueError(f"bone {k} must have an earlier bone as parent")
        if self.heads.shape != (b, 3):
            raise ValueError("heads must be (B, 3)")
        if self.weights.ndim != 2 or self.weights.shape[1] != b:
            raise ValueError("weights must be (N, B)")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(1) - 1) > 1e-6):
            raise ValueError("skinning weight rows must be non-negative and sum to 1")

    @property
    def n_bones(self):
        return len(self.parents)


def _leg_layout(spec: QuadrupedSpec):
    """Grid positions (row, col) of the four leg patches, left side first."""
    p, R, nr = spec.patch, spec.segments, spec.rings
    # left patch centred near 135 degrees from the top
    j0 = int(round(0.375 * R - p / 2))
    j0 = min(max(j0, 1), R // 2 - p - 1)
    front = int(round(0.72 * (nr - 1) - p / 2))
    back = int(round(0.28 * (nr - 1) - p / 2))
    return {1: (front, j0), 3: (back, j0)}


def make_quadruped(spec: QuadrupedSpec = QuadrupedSpec()):
    """Returns ``(mesh, mirror_map, skeleton)`` for a symmetric quadruped."""
    R, nr, p, nl = spec.segments, spec.rings, spec.patch, spec.leg_rings
    half_len = spec.body_length / 2
    cap = half_len + 0.6 * spec.body_radius
    ys = np.linspace(-half_len, half_len, nr)
    prof = (1 - (np.abs(ys) / cap) ** 3) ** (1 / 3)
    head_bump = 1 + (spec.head_scale - 1) * np.exp(-((ys - 0.8 * half_len) / (0.25 * half_len)) ** 2)
    radii = spec.body_radius * prof * head_bump
    ang = 2 * np.pi * np.arange(R) / R
    z_body = spec.leg_length + spec.body_radius

    layout = _leg_layout(spec)
    mirror_col = lambda j: (R - j) % R  # noqa: E731
    patches = {}
    for leg, (i0, j0) in layout.items():
        patches[leg] = (i0, j0)
        patches[leg + 1] = (i0, mirror_col(j0 + p))
    removed = set()
    holes = set()
    for i0, j0 in patches.values():
        for di in range(p):
            for dj in range(p):
                holes.add((i0 + di, (j0 + dj) % R))
        for di in range(1, p):
            for dj in range(1, p):
                removed.add((i0 + di, (j0 + dj) % R))

    verts, index = [], {}
    part, side = [], []
    for i in range(nr):
        for j in range(R):
            if (i, j) in removed:
                continue
            index[i, j] = len(verts)
            verts.append((radii[i] * np.sin(ang[j]), ys[i], z_body + radii[i] * np.cos(ang[j])))
            part.append(0)
    tail = len(verts)
    verts.append((0.0, -cap, z_body))
    part.append(0)
    head = len(verts)
    verts.append((0.0, cap * (1 + 0.1 * (spec.head_scale - 1)), z_body))
    part.append(0)

    faces = []
    for i in range(nr - 1):
        for j in range(R):
            if (i, j) in holes:
                continue
            a, b = index[i, j], index[i, (j + 1) % R]
            c, d = index[i + 1, (j + 1) % R], index[i + 1, j]
            if j < R // 2:
                faces += [(a, c, b), (a, d, c)]
            else:
                faces += [(a, d, b), (b, d, c)]
    for j in range(R):
        faces.append((tail, index[0, j], index[0, (j + 1) % R]))
        faces.append((head, index[nr - 1, (j + 1) % R], index[nr - 1, j]))

    mirror = {}
    for (i, j), k in index.items():
        mirror[k] = index[i, mirror_col(j)]
    mirror[tail], mirror[head] = tail, head

    heads = {}
    for leg, (i0, j0) in layout.items():
        loop = ([(i0, j0 + t) for t in range(p)] + [(i0 + t, j0 + p) for t in range(p)]
                + [(i0 + p, j0 + p - t) for t in range(p)] + [(i0 + p - t, j0) for t in range(p)])
        loop_ids = [index[ij] for ij in loop]
        loop_pts = np.array([verts[k] for k in loop_ids])
        c0 = loop_pts.mean(axis=0)
        heads[leg] = c0
        foot = np.array([c0[0] + 0.15 * spec.leg_radius, c0[1], spec.leg_radius * 0.5])
        axis = foot - c0
        axis_len = np.linalg.norm(axis)
        axis /= axis_len
        # circle basis perpendicular to the leg axis
        u = np.cross(axis, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        off = loop_pts - c0
        ang = np.arctan2(off @ w, off @ u)
        prev = loop_ids
        new_ids = []
        for l in range(1, nl + 1):
            t = l / nl
            blend = min(1.0, l / 2)
            centre = c0 + t * axis * axis_len
            circle = spec.leg_radius * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), w))
            flat = off - np.outer(off @ axis, axis)
            ring = centre + (1 - blend) * flat + blend * circle
            ids = list(range(len(verts), len(verts) + len(ring)))
            verts.extend(map(tuple, ring))
            part.extend([leg] * len(ring))
            n = len(ids)
            for k in range(n):
                a, b = prev[k], prev[(k + 1) % n]
                c, d = ids[(k + 1) % n], ids[k]
                faces += [(a, c, b), (a, d, c)]
            prev = ids
            new_ids += ids
        tip = len(verts)
        verts.append(tuple(c0 + axis * (axis_len + 0.5 * spec.leg_radius)))
        part.append(leg)
        new_ids.append(tip)
        n = len(prev)
        for k in range(n):
            faces.append((prev[(k + 1) % n], prev[k], tip))
        # mirrored leg on the right side
        start = len(verts)
        mid = {k: start + t for t, k in enumerate(new_ids)}
        for k in new_ids:
            x, y, z = verts[k]
            verts.append((-x, y, z))
            part.append(leg + 1)
        for k in new_ids:
            mirror[k] = mid[k]
            mirror[mid[k]] = k
        leg_faces = [f for f in faces if any(v in mid for v in f)]
        remap = lambda v: mid[v] if v in mid else mirror[v]  # noqa: E731
        for a, b, c in leg_faces:
            faces.append((remap(a), remap(c), remap(b)))
        heads[leg + 1] = c0 * np.array([-1.0, 1.0, 1.0])

    v = np.array(verts)
    n = len(v)
    mir = np.array([mirror[k] for k in range(n)])
    # make the reflection exact
    left = v[:, 0] > 1e-9
    v[mir[left]] = v[left] * np.array([-1.0, 1.0, 1.0])
    centre = mir == np.arange(n)
    v[centre, 0] = 0.0
    side = np.where(centre, 0, np.where(v[:, 0] > 0, 1, -1))
    mesh = Mesh(v, np.array(faces))
    mm = MirrorMap(mirror=mir, side=side, part=np.array(part))
    skel = _quadruped_skeleton(spec, v, mm, heads, z_body, half_len)
    return mesh, mm, skel


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _quadruped_skeleton(spec, v, mm, heads, z_body, half_len, sharpness=0.03):
    """Six bones: spine root, neck, four legs; weights from distances to the bones."""
    spine = np.array([0.0, -0.1 * half_len, z_body])
    neck = np.array([0.0, 0.55 * half_len, z_body])
    nose = np.array([0.0, half_len + spec.body_radius, z_body])
    tail = np.array([0.0, -half_len - spec.body_radius, z_body])
    bone_heads = [spine, neck] + [heads[k] for k in (1, 2, 3, 4)]
    parents = [-1, 0, 0, 0, 0, 0]
    segs = [(tail, neck), (neck, nose)]
    radii = [spec.body_radius, spec.body_radius * spec.head_scale]
    for k in (1, 2, 3, 4):
        foot = heads[k].copy()
        foot[2] = 0.0
        segs.append((heads[k], foot))
        radii.append(spec.leg_radius)
    # distance to each bone's surface shell, turned into soft weights
    d = np.stack([_segment_distance(v, a, b) - r for (a, b), r in zip(segs, radii)], axis=1)
    d = np.abs(d) / spec.body_radius
    logits = -d / sharpness
    # legs own their tubes; body vertices never take a leg of the other side
    for k, leg in enumerate((1, 2, 3, 4)):
        other = (mm.part > 0) & (mm.part != leg)
        logits[other, 2 + k] = -np.inf
        wrong_side = (mm.part == 0) & (mm.side * (1 if leg % 2 else -1) < 0)
        logits[wrong_side, 2 + k] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    wts = np.exp(logits)
    wts /= wts.sum(axis=1, keepdims=True)
    wts[wts < 1e-12] = 0.0
    wts /= wts.sum(axis=1, keepdims=True)
    names = ("spine", "neck", "front_left", "front_right", "back_left", "back_right")
    return Skeleton(parents=parents, heads=np.array(bone_heads), weights=wts, names=names)


# ---------------------------------------------------------------- base features

@dataclass(frozen=True)
class FeatureRecipe:
    """Synthetic stand-in for image-derived base features.

    ``symmetric-semantic`` features are a smooth function of side-agnostic
    coordinates (|lateral|, longitudinal, height, limb flag), so mirrored
    vertices look alike. ``side_cue`` adds a weak signed-lateral channel
    (zero gives exact mirror symmetry). ``positional`` features encode raw
    coordinates and carry no ambiguity. The random basis depends only on
    ``basis_seed`` so that every shape shares one feature space.
    """

    kind: str = "symmetric-semantic"
    dim: int = 32
    noise: float = 0.05
    side_cue: float = 0.025
    bandwidth: float = 1.5
    basis_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("symmetric-semantic", "positional"):
            raise ValueError(f"unknown feature recipe {self.kind!r}")
        if self.dim < 4:
            raise ValueError("feature dim must be at least 4")
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")


def _semantic_coords(v, mirror: MirrorMap):
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    xs = np.abs(x).max() or 1.0
    ys = np.abs(y).max() or 1.0
    zr = (z.max() - z.min()) or 1.0
    return x / xs, y / ys, (z - z.min()) / zr, (mirror.part > 0).astype(np.float64)


def synth_base_features(mesh: Mesh, mirror: MirrorMap, recipe: FeatureRecipe = FeatureRecipe(),
                        seed: int = 0) -> np.ndarray:
    """Unit-norm (N, dim) float32 features; ``seed`` only drives the noise."""
    from .features import normalize_rows

    basis = np.random.default_rng(recipe.basis_seed)
    xn, yn, zn, limb = _semantic_coords(mesh.vertices, mirror)
    if recipe.kind == "positional":
        q = np.stack([xn, yn, zn], axis=1)
        n_cue = 0
    else:
        q = np.stack([np.abs(xn), yn, zn, limb], axis=1)
        n_cue = 2 if recipe.side_cue > 0 else 0
    n_rff = recipe.dim - n_cue
    omega = basis.normal(0.0, recipe.bandwidth, (q.shape[1], n_rff))
    phase = basis.uniform(0.0, 2 * np.pi, n_rff)
    feats = np.cos(q @ omega + phase) * np.sqrt(2.0 / n_rff)
    if n_cue:
        cue = recipe.side_cue * np.stack([xn, xn * yn], axis=1)
        feats = np.concatenate([feats, cue], axis=1)
    feats = normalize_rows(feats)
    if recipe.noise > 0:
        rng = np.random.default_rng(seed)
        feats = feats + rng.normal(0.0, recipe.noise / np.sqrt(recipe.dim), feats.shape)
        feats = normalize_rows(feats)
    return feats.astype(np.float32)


# ---------------------------------------------------------------- suites and ground truth

def random_quadruped_spec(seed: int, base: QuadrupedSpec = QuadrupedSpec()) -> QuadrupedSpec:
    """Proportions drawn around ``base``; resolution is kept so connectivity is shared."""
    rng = np.random.default_rng(seed)
    return replace(
        base,
        body_length=base.body_length * rng.uniform(0.8, 1.2),
        body_radius=base.body_radius * rng.uniform(0.85, 1.15),
        leg_length=base.leg_length * rng.uniform(0.75, 1.25),
        leg_radius=base.leg_radius * rng.uniform(0.85, 1.15),
        head_scale=base.head_scale * rng.uniform(0.9, 1.1),
    )


def random_pose(n_bones: int, seed: int, bone_angle: float = 0.35, root_angle: float = 0.4,
                translation: float = 0.3, scale_range=(0.9, 1.1)):
    """A seeded pose with per-bone axis-angles of std ``bone_angle`` radians."""
    from .pose import PoseParams

    rng = np.random.default_rng(seed)
    return PoseParams(rng.normal(0.0, root_angle / np.sqrt(3), 3), rng.normal(0.0, translation, 3),
                      rng.uniform(*scale_range), rng.normal(0.0, bone_angle / np.sqrt(3), (n_bones, 3)))


def ground_truth_correspondence(source: Mesh, target: Mesh, sample_indices=None):
    """``(indices, positions)`` mapping source vertices to their image on ``target``.

    ``target`` must share the source's vertex ordering (a transformed or
    reposed copy); the vertex bijection is then the identity.
    """
    if source.n_vertices != target.n_vertices:
        raise ValueError(f"vertex count mismatch {source.n_vertices} vs {target.n_vertices}")
    idx = np.arange(source.n_vertices) if sample_indices is None else np.asarray(sample_indices, dtype=np.int64)
    return idx, np.asarray(target.vertices[idx], dtype=np.float64)


def write_correspondence_csv(path, indices, positions) -> None:
    positions = np.asarray(positions, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_index", "target_x", "target_y", "target_z"])
        for i, p in zip(indices, positions):
            w.writerow([int(i)] + [repr(float(c)) for c in p])


def read_correspondence_csv(path):
    idx, pos = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_index", "target_x", "target_y", "target_z"]:
            raise ValueError(f"{path}: unexpected correspondence header {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{line}: expected 4 fields")
            idx.append(int(row[0]))
            pos.append([float(c) for c in row[1:]])
    return np.asarray(idx, dtype=np.int64), np.asarray(pos, dtype=np.float64).reshape(-1, 3)


@dataclass
class SuiteShape:
    mesh: Mesh
    mirror: MirrorMap
    skeleton: Skeleton
    features: np.ndarray
    spec: QuadrupedSpec


def quadruped_suite(count: int = 8, recipe: FeatureRecipe = FeatureRecipe(), seed: int = 0,
                    base: QuadrupedSpec = QuadrupedSpec()) -> list:
    """``count`` quadrupeds of varied proportions with per-shape feature noise."""
    out = []
    for k in range(count):
        spec = random_quadruped_spec(seed * 1000 + k, base)
        mesh, mirror, skeleton = make_quadruped(spec)
        feats = synth_base_features(mesh, mirror, recipe, seed=seed * 1000 + 100 + k)
        out.append(SuiteShape(mesh, mirror, skeleton, feats, spec))
    return out
