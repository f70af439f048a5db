"""Central finite-difference checks of every training and alignment objective.

Each check builds a toy instance in float64, takes analytic gradients from
the tape, and compares them with central differences on a random subset of
parameter coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .losses import (contrastive_loss, geometric_similarity_loss, naive_geodesic_loss,
                     reconstruction_loss, relative_geodesic_loss, combined_loss, LossWeights)
from .network import Autoencoder
from .pose import arap_loss, lbs_tensor, point_loss, smooth_loss
from .synth import Skeleton

STEP = 1e-4
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-3

TOY = dict(input_dim=16, embed_dim=4, points=8, anchors=3)


@dataclass
class CheckResult:
    name: str
    coordinates: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)


def _check(name, params: dict, loss_fn, coords: int, rng) -> CheckResult:
    """``loss_fn(tensors) -> scalar Tensor``; ``params`` are float64 arrays perturbed in place."""
    T = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss_fn(T).backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(params[k])) for k, t in T.items()}
    keys = list(params)
    sizes = np.array([params[k].size for k in keys])
    flat = rng.choice(sizes.sum(), size=min(coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for c in flat:
        ki = int(np.searchsorted(offsets, c, side="right") - 1)
        k, j = keys[ki], int(c - offsets[ki])
        p = params[k].reshape(-1)
        orig = p[j]
        p[j] = orig + STEP
        up = float(loss_fn({q: Tensor(v) for q, v in params.items()}).data)
        p[j] = orig - STEP
        down = float(loss_fn({q: Tensor(v) for q, v in params.items()}).data)
        p[j] = orig
        num = (up - down) / (2 * STEP)
        worst = max(worst, float(relative_error(grads[k].reshape(-1)[j], num)))
    return CheckResult(name, len(flat), worst)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _network_checks(rng, coords):
    in_dim, emb_dim, n, n_anchors = TOY["input_dim"], TOY["embed_dim"], TOY["points"], TOY["anchors"]
    base = _unit_rows(rng, n, in_dim)
    anchors = np.sort(rng.choice(n, n_anchors, replace=False))
    geo = rng.uniform(0.1, 1.0, (n, n_anchors))
    geo[anchors, np.arange(n_anchors)] = 0.0
    rescaled = geo / geo.max()
    sphere = Autoencoder(in_dim, emb_dim, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    flat = Autoencoder(in_dim, emb_dim, seed=int(rng.integers(1 << 31)), dtype=np.float64, normalize_embedding=False)
    x = Tensor(base)

    def l_c(P):
        return contrastive_loss(sphere.encode(x, P), anchors, rescaled).tensor

    def l_r(P):
        return reconstruction_loss(x, sphere.decode(sphere.encode(x, P), P)).tensor

    def full(P):
        emb = sphere.encode(x, P)
        return combined_loss(LossWeights(), contrastive_loss(emb, anchors, rescaled),
                             reconstruction_loss(x, sphere.decode(emb, P))).tensor

    def rgl(P):
        return relative_geodesic_loss(flat.encode(x, P), anchors, geo).tensor

    def ngl(P):
        return naive_geodesic_loss(flat.encode(x, P), anchors, geo).tensor

    def gsl(P):
        return geometric_similarity_loss(sphere.encode(x, P), anchors, geo).tensor

    out = []
    for name, fn, model in (("L_c", l_c, sphere), ("L_r", l_r, sphere), ("combined", full, sphere),
                            ("RGL", rgl, flat), ("NGL", ngl, flat), ("GSL", gsl, sphere)):
        params = {k: v.copy() for k, v in model.params.items()}
        out.append(_check(name, params, fn, coords, rng))
    return out


def toy_skeleton(rng, n=8):
    """Three-bone chain with random soft skinning weights."""
    heads = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.2]])
    logits = rng.normal(size=(n, 3)) * 2
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return Skeleton(np.array([-1, 0, 1]), heads, weights, ("root", "mid", "tip"))


def _pose_params(rng, bones):
    return {
        "root_rot": rng.normal(0, 0.4, 3), "root_trans": rng.normal(0, 0.3, 3),
        "log_scale": np.array(rng.normal(0, 0.1)), "bone_rots": rng.normal(0, 0.4, (bones, 3)),
    }


def _pose_checks(rng, coords):
    n = TOY["points"]
    out = {"point": [], "ARAP": [], "smooth": []}
    trials = max(1, int(np.ceil(coords / 16)))
    for _ in range(trials):
        sk = toy_skeleton(rng, n)
        rest = rng.normal(size=(n, 3)) + np.array([0.0, 1.0, 0.0])
        edges = np.array([(i, (i + 1) % n) for i in range(n)] + [(i, (i + 3) % n) for i in range(n)])
        rest_len = np.linalg.norm(rest[edges[:, 0]] - rest[edges[:, 1]], axis=1) * rng.uniform(0.8, 1.2, len(edges))
        target = rest + rng.normal(0, 0.5, rest.shape)

        def pose(P):
            return lbs_tensor(sk, P["root_rot"], P["root_trans"], P["log_scale"], P["bone_rots"], rest)

        out["point"].append(_check("point", _pose_params(rng, 3), lambda P: point_loss(pose(P), target), 16, rng))
        out["ARAP"].append(_check("ARAP", _pose_params(rng, 3), lambda P: arap_loss(edges, rest_len, pose(P)), 16, rng))

        frames = [_pose_params(rng, 3) for _ in range(3)]
        seq = {f"{t}.{k}": v for t, fr in enumerate(frames) for k, v in fr.items()}

        def smooth(P):
            xs = [lbs_tensor(sk, P[f"{t}.root_rot"], P[f"{t}.root_trans"], P[f"{t}.log_scale"],
                             P[f"{t}.bone_rots"], rest) for t in range(3)]
            return smooth_loss(xs)

        out["smooth"].append(_check("smooth", seq, smooth, 16, rng))
    return [CheckResult(k, sum(r.coordinates for r in v), max(r.max_rel_error for r in v)) for k, v in out.items()]


def run_gradcheck(seed: int = 0, coords: int = 120) -> list:
    """All checks; each covers at least ``coords`` parameter coordinates."""
    rng = np.random.default_rng(seed)
    return _network_checks(rng, coords) + _pose_checks(rng, coords)
