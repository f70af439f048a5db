"""Cosine matching, correspondence metrics, clustering, PCA and texture transfer."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import ImageFeatureMap, normalize_rows
from .mesh import Mesh, max_extent

log = logging.getLogger(__name__)

MATCH_CHUNK = 256
ACCURACY_GRID = tuple(round(0.0025 * k, 4) for k in range(1, 41))  # 0.25% .. 10%
KMEANS_ROUNDS = 300


def _unit(matrix, name):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix")
    return normalize_rows(m)


def _argmax_cosine(src, tgt, threads=1):
    """Row-wise (index, score) of the best target for each source row.

    Chunk boundaries do not depend on ``threads`` so results are identical
    for any worker count.
    """
    starts = range(0, len(src), MATCH_CHUNK)

    def work(s):
        sim = src[s:s + MATCH_CHUNK] @ tgt.T
        idx = np.argmax(sim, axis=1)  # first maximum, i.e. lowest index on ties
        return idx, sim[np.arange(len(idx)), idx]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    idx = np.concatenate([p[0] for p in parts])
    score = np.clip(np.concatenate([p[1] for p in parts]), -1.0, 1.0)
    return idx.astype(np.int64), score


@dataclass
class Correspondence:
    source: np.ndarray  # source indices
    target: np.ndarray  # matched target index per source index
    score: np.ndarray  # cosine similarity of each match

    def __len__(self):
        return len(self.source)


def match_points(source_feats, target_feats, source_indices=None, threads: int = 1) -> Correspondence:
    """Best-cosine target row for every (selected) source row."""
    src = _unit(source_feats, "source features")
    tgt = _unit(target_feats, "target features")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError(f"feature dim mismatch {src.shape[1]} vs {tgt.shape[1]}")
    sel = np.arange(len(src)) if source_indices is None else np.asarray(source_indices, dtype=np.int64)
    idx, score = _argmax_cosine(src[sel], tgt, threads)
    return Correspondence(sel, idx, score)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricReport:
    err: Optional[float] = None
    acc: Optional[float] = None
    epsilon: Optional[float] = None
    extent: Optional[float] = None
    distances: Optional[np.ndarray] = None  # per-point Euclidean error
    curve: list = field(default_factory=list)  # (threshold, accuracy %)


def _point_distances(corr: Correspondence, target_mesh: Mesh, ground_truth):
    """Per-point squared and plain distances; each squared norm is an exactly rounded sum."""
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 3)
    if len(gt) != len(corr):
        raise ValueError(f"ground truth has {len(gt)} points for {len(corr)} matches")
    diff = target_mesh.vertices[corr.target] - gt
    sq = np.array([math.fsum(r) for r in (diff * diff).tolist()])
    return sq, np.sqrt(sq)


def correspondence_error(corr: Correspondence, target_mesh: Mesh, ground_truth) -> MetricReport:
    """Mean squared distance between matched and ground-truth target positions."""
    sq, dist = _point_distances(corr, target_mesh, ground_truth)
    err = math.fsum(sq.tolist()) / len(sq) if len(sq) else 0.0
    return MetricReport(err=err, distances=dist)


def _accuracy(dist, limit):
    return 100.0 * int(np.count_nonzero(dist < limit)) / len(dist)


def correspondence_accuracy(corr: Correspondence, target_mesh: Mesh, ground_truth, epsilon: float,
                            grid=ACCURACY_GRID) -> MetricReport:
    """Percentage of matches closer than ``epsilon`` times the target's largest extent."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    _, dist = _point_distances(corr, target_mesh, ground_truth)
    g = max_extent(target_mesh)
    curve = [(t, _accuracy(dist, t * g)) for t in grid]
    return MetricReport(acc=_accuracy(dist, epsilon * g), epsilon=epsilon, extent=g, distances=dist, curve=curve)


def evaluate(corr: Correspondence, target_mesh: Mesh, ground_truth, epsilon: float = 0.01) -> MetricReport:
    e = correspondence_error(corr, target_mesh, ground_truth)
    a = correspondence_accuracy(corr, target_mesh, ground_truth, epsilon)
    a.err = e.err
    return a


def side_confusion(corr: Correspondence, source_side, target_side, mask=None) -> float:
    """Fraction of (masked) source points matched to a target point on the other side."""
    ss = np.asarray(source_side)[corr.source]
    ts = np.asarray(target_side)[corr.target]
    keep = np.ones(len(corr), bool) if mask is None else np.asarray(mask, bool)[corr.source]
    if not keep.any():
        raise ValueError("no points selected for side confusion")
    return float(np.mean(ss[keep] != ts[keep]))


def write_report_csv(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("err", "acc", "epsilon", "extent"):
            val = getattr(report, key)
            if val is not None:
                w.writerow([key, repr(float(val))])


def write_curve_csv(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "accuracy"])
        for t, a in report.curve:
            w.writerow([repr(t), repr(a)])


def write_correspondence_csv(path, corr: Correspondence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_index", "target_index", "score"])
        for s, t, c in zip(corr.source, corr.target, corr.score):
            w.writerow([int(s), int(t), repr(float(c))])


def read_match_csv(path) -> Correspondence:
    src, tgt, score = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_index", "target_index", "score"]:
            raise ValueError(f"{path}: unexpected match header {header}")
        for row in reader:
            src.append(int(row[0]))
            tgt.append(int(row[1]))
            score.append(float(row[2]))
    return Correspondence(np.asarray(src, np.int64), np.asarray(tgt, np.int64), np.asarray(score))


# ---------------------------------------------------------------- clustering

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list  # mean cosine distance after every round
    rounds: int


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d = 1.0 - x @ x[centers[0]]
    for _ in range(1, k):
        w = np.maximum(d, 0.0) ** 2
        total = w.sum()
        nxt = int(rng.choice(n, p=w / total)) if total > 0 else int(rng.integers(n))
        centers.append(nxt)
        d = np.minimum(d, 1.0 - x @ x[nxt])
    return x[centers].copy()


def kmeans(features, k: int, seed: int = 0, max_rounds: int = KMEANS_ROUNDS) -> KMeansResult:
    """Spherical Lloyd iterations with cosine distance and k-means++ seeding."""
    x = _unit(features, "features")
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of rows ({n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = None
    objective = []
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sim = x @ centroids.T
        new = np.argmax(sim, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        dist = 1.0 - sim[np.arange(n), labels]
        for c in range(k):
            members = labels == c
            if not members.any():
                # steal the point farthest from its centroid
                far = int(np.argmax(dist))
                labels[far] = c
                dist[far] = 0.0
                members = labels == c
            m = x[members].sum(axis=0)
            norm = np.linalg.norm(m)
            centroids[c] = m / norm if norm > 0 else x[members][0]
        objective.append(float(np.mean(1.0 - np.einsum("ij,ij->i", x, centroids[labels]))))
    return KMeansResult(centroids, labels, objective, rounds)


def segment_by_centroids(target_feats, centroids) -> np.ndarray:
    x = _unit(target_feats, "target features")
    c = _unit(centroids, "centroids")
    if x.shape[1] != c.shape[1]:
        raise ValueError(f"feature dim mismatch {x.shape[1]} vs {c.shape[1]}")
    return _argmax_cosine(x, c)[0]


# ---------------------------------------------------------------- PCA

@dataclass
class PcaResult:
    projection: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    mean: np.ndarray


def pca_project(features, out_dim: int = 2) -> PcaResult:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] <= out_dim:
        raise ValueError(f"need more than {out_dim} rows")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2 / (len(x) - 1)
    rank = int(np.count_nonzero(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    comps = np.zeros((out_dim, x.shape[1]))
    ev = np.zeros(out_dim)
    take = min(out_dim, rank)
    if take < out_dim:
        log.warning("features have rank %d < %d; trailing components are zero", rank, out_dim)
    comps[:take] = vt[:take]
    ev[:take] = var[:take]
    total = var.sum()
    ratio = ev / total if total > 0 else np.zeros(out_dim)
    return PcaResult(xc @ comps.T, comps, ev, ratio, mean)


# ---------------------------------------------------------------- texturing

def texture_from_image(mesh_feats, image: ImageFeatureMap, threads: int = 1) -> np.ndarray:
    """Each vertex takes the color of its most similar foreground pixel."""
    pix_f, pix_c, _ = image.foreground()
    if len(pix_f) == 0:
        raise ValueError("no foreground pixels")
    v = _unit(mesh_feats, "mesh features")
    if v.shape[1] != pix_f.shape[1]:
        raise ValueError(f"feature dim mismatch {v.shape[1]} vs {pix_f.shape[1]}")
    idx, _ = _argmax_cosine(v, _unit(pix_f, "pixel features"), threads)
    return np.asarray(pix_c)[idx]


def texture_mesh_to_mesh(source_feats, source_colors, target_feats, threads: int = 1) -> np.ndarray:
    src = _unit(source_feats, "source features")
    colors = np.asarray(source_colors)
    if len(colors) != len(src):
        raise ValueError("one color per source vertex required")
    tgt = _unit(target_feats, "target features")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError(f"feature dim mismatch {src.shape[1]} vs {tgt.shape[1]}")
    idx, _ = _argmax_cosine(tgt, src, threads)
    return colors[idx]
