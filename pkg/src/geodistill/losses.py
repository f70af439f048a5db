"""Cosine similarity and the training objectives.

All losses take :class:`~geodistill.autodiff.Tensor` embeddings (plain
arrays are wrapped) and return a :class:`LossValue` whose ``tensor`` can be
back-propagated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor

log = logging.getLogger(__name__)

GSL_NEIGHBORS = 8
RGL_MIN_GEODESIC = 1e-8


@dataclass
class LossValue:
    tensor: Tensor
    breakdown: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.tensor.data)

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class LossWeights:
    w_r: float = 1.0
    w_c: float = 1.0

    def __post_init__(self):
        if self.w_r < 0 or self.w_c < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_r == 0 and self.w_c == 0:
            raise ValueError("loss weights cannot both be zero")


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _check_anchors(anchors, n):
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    if anchors.size == 0:
        raise ValueError("need at least one anchor")
    if anchors.min() < 0 or anchors.max() >= n:
        raise IndexError(f"anchor index out of range for {n} points")
    return anchors


def contrastive_loss(embedded, anchors, rescaled) -> LossValue:
    """Mean absolute gap between rescaled geodesics and (1 - cos)/2 over all (point, anchor) pairs.

    Rows of ``embedded`` must be unit length.
    """
    emb = as_tensor(embedded)
    n = emb.shape[0]
    anchors = _check_anchors(anchors, n)
    target = np.asarray(rescaled, dtype=emb.dtype)
    if target.shape != (n, len(anchors)):
        raise ValueError(f"geodesic matrix shape {target.shape} does not match ({n}, {len(anchors)})")
    cos = (emb @ emb[anchors].T).clip(-1.0, 1.0)
    loss = (Tensor(target) - (1.0 - cos) * 0.5).abs().mean()
    return LossValue(loss, {"contrastive": float(loss.data)})


def reconstruction_loss(base, decoded) -> LossValue:
    """Mean cosine dissimilarity between unit base rows and their reconstructions."""
    orig = as_tensor(base)
    recon = as_tensor(decoded)
    if orig.shape != recon.shape:
        raise ValueError(f"shape mismatch {orig.shape} vs {recon.shape}")
    cos = (orig * recon).sum(axis=1).clip(-1.0, 1.0)
    loss = (1.0 - cos).mean()
    return LossValue(loss, {"reconstruction": float(loss.data)})


def combined_loss(weights: LossWeights, l_c: Optional[LossValue], l_r: Optional[LossValue]) -> LossValue:
    total = None
    breakdown = {}
    for weight, part in ((weights.w_c, l_c), (weights.w_r, l_r)):
        if part is None or weight == 0:
            continue
        term = part.tensor * weight
        total = term if total is None else total + term
        breakdown.update(part.breakdown)
    if total is None:
        raise ValueError("combined loss has no active terms")
    return LossValue(total, breakdown)


def _embedding_distances(emb, anchors):
    diff = emb[:, None, :] - emb[anchors][None, :, :]
    return diff.norm(axis=-1)


def _reduce(terms, count, reduction):
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.sum() * (1.0 / max(count, 1))
    raise ValueError(f"unknown reduction {reduction!r}")


def relative_geodesic_loss(embedded, anchors, geodesics, reduction="sum") -> LossValue:
    """Sum over pairs of squared relative error between embedding and geodesic distance.

    Pairs with geodesic distance below 1e-8 are skipped.
    """
    emb = as_tensor(embedded)
    anchors = _check_anchors(anchors, emb.shape[0])
    geo = np.asarray(geodesics, dtype=np.float64)
    keep = geo >= RGL_MIN_GEODESIC
    # pairs of distinct points that still have zero geodesic distance
    degenerate = int(np.count_nonzero(~keep & (np.arange(emb.shape[0])[:, None] != anchors[None, :])))
    if degenerate:
        log.warning("RGL: excluded %d distinct-point pairs with zero geodesic distance", degenerate)
    emb_dist = _embedding_distances(emb, anchors)
    inv = np.where(keep, 1.0 / np.where(keep, geo, 1.0) ** 2, 0.0).astype(emb.dtype)
    resid = emb_dist - Tensor(geo.astype(emb.dtype))
    loss = _reduce(resid * resid * Tensor(inv), int(keep.sum()), reduction)
    return LossValue(loss, {"rgl": float(loss.data), "rgl_excluded": degenerate})


def naive_geodesic_loss(embedded, anchors, geodesics, reduction="sum") -> LossValue:
    """Sum over pairs of squared difference between embedding and geodesic distance."""
    emb = as_tensor(embedded)
    anchors = _check_anchors(anchors, emb.shape[0])
    geo = np.asarray(geodesics, dtype=emb.dtype)
    resid = _embedding_distances(emb, anchors) - Tensor(geo)
    loss = _reduce(resid * resid, geo.size, reduction)
    return LossValue(loss, {"ngl": float(loss.data)})


def geometric_similarity_loss(embedded, anchors, geodesics, neighbors: int = GSL_NEIGHBORS) -> LossValue:
    """Mean over anchors of the cosine dissimilarity between two distance profiles.

    For each anchor, take its nearest neighbours in the current embedding.
    One profile holds their embedding distances to the anchor, the other
    their geodesic distances.
    """
    emb = as_tensor(embedded)
    n = emb.shape[0]
    anchors = _check_anchors(anchors, n)
    geo = np.asarray(geodesics, dtype=emb.dtype)
    neighbors = min(neighbors, n - 1)
    if neighbors < 1:
        raise ValueError("GSL needs at least two points")
    emb_dist = _embedding_distances(emb, anchors)  # (N, anchors)
    order = np.argsort(emb_dist.data, axis=0, kind="stable")[: neighbors + 1].T
    # drop the anchor itself from its own neighbour list
    nb = np.stack([row[row != a][:neighbors] for row, a in zip(order, anchors)])
    cols = np.arange(len(anchors))[:, None]
    geo_prof = geo[nb, cols]
    geo_norm = np.linalg.norm(geo_prof, axis=1)
    emb_norm = np.linalg.norm(emb_dist.data[nb, cols], axis=1)
    ok = (geo_norm > 0) & (emb_norm > 0)
    if not ok.any():
        raise ValueError("GSL has no usable anchors")
    nb, geo_prof, geo_norm = nb[ok], geo_prof[ok], geo_norm[ok]
    emb_prof = emb_dist[nb, cols[ok]]
    unit_geo = Tensor((geo_prof / geo_norm[:, None]).astype(emb.dtype))
    cos = (emb_prof * unit_geo).sum(axis=1) / emb_prof.norm(axis=1)
    loss = (1.0 - cos).mean()
    return LossValue(loss, {"gsl": float(loss.data)})


ABLATIONS = {
    "rgl": relative_geodesic_loss,
    "ngl": naive_geodesic_loss,
    "gsl": geometric_similarity_loss,
}


def ablation_loss(variant: str, embedded, anchors, geodesics, **kw) -> LossValue:
    try:
        fn = ABLATIONS[variant.lower()]
    except KeyError:
        raise ValueError(f"unknown ablation variant {variant!r}") from None
    return fn(embedded, anchors, geodesics, **kw)
