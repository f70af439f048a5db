"""Linear blend skinning, pose alignment and skinning-weight regression."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, rodrigues, stack
from .network import OptimizerState, adamw_step
from .synth import Skeleton


@dataclass
class PoseParams:
    """Root axis-angle, root translation, uniform scale and per-bone axis-angles."""

    root_rot: np.ndarray
    root_trans: np.ndarray
    scale: float
    bone_rots: np.ndarray

    def __post_init__(self):
        self.root_rot = np.asarray(self.root_rot, dtype=np.float64).reshape(3)
        self.root_trans = np.asarray(self.root_trans, dtype=np.float64).reshape(3)
        self.bone_rots = np.asarray(self.bone_rots, dtype=np.float64).reshape(-1, 3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not (np.all(np.isfinite(self.root_rot)) and np.all(np.isfinite(self.root_trans))
                and np.all(np.isfinite(self.bone_rots)) and np.isfinite(self.scale)):
            raise ValueError("pose parameters must be finite")

    @classmethod
    def identity(cls, n_bones: int) -> "PoseParams":
        return cls(np.zeros(3), np.zeros(3), 1.0, np.zeros((n_bones, 3)))

    def copy(self) -> "PoseParams":
        return PoseParams(self.root_rot.copy(), self.root_trans.copy(), self.scale, self.bone_rots.copy())


def _check_weights(skeleton: Skeleton, n):
    wts = skeleton.weights
    if wts.shape[0] != n:
        raise ValueError(f"skinning weights have {wts.shape[0]} rows for {n} vertices")
    if np.any(np.abs(wts.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("skinning weight rows must sum to 1")


def bone_transforms(skeleton: Skeleton, bone_rots):
    """World transforms (A_b, t_b) of every bone as Tensors of shape (B, 3, 3), (B, 3)."""
    R = rodrigues(bone_rots)
    heads = skeleton.heads
    As, ts = [], []
    for b in range(skeleton.n_bones):
        Rb = R[b]
        h = Tensor(heads[b].reshape(3, 1).astype(R.dtype))
        local_t = (h - Rb @ h).reshape(3)
        p = skeleton.parents[b]
        if p < 0:
            As.append(Rb)
            ts.append(local_t)
        else:
            As.append(As[p] @ Rb)
            ts.append((As[p] @ local_t.reshape(3, 1)).reshape(3) + ts[p])
    return stack(As), stack(ts)


def lbs_tensor(skeleton: Skeleton, root_rot, root_trans, log_scale, bone_rots, rest_vertices, subset=None):
    """Differentiable LBS; ``subset`` restricts the output to those vertex indices."""
    rest = np.asarray(rest_vertices, dtype=np.float64)
    wts = skeleton.weights
    if subset is not None:
        rest, wts = rest[subset], wts[subset]
    rots, offsets = bone_transforms(skeleton, as_tensor(bone_rots))
    # blend displacements rather than positions so the identity pose returns the rest shape exactly
    delta = rots - Tensor(np.eye(3, dtype=rots.dtype))
    per_bone = Tensor(rest[None]) @ delta.transpose(0, 2, 1) + offsets.reshape(-1, 1, 3)  # (bones, N, 3)
    blended = (per_bone * Tensor(wts.T[:, :, None])).sum(axis=0) + Tensor(rest)
    root = rodrigues(as_tensor(root_rot))
    return (blended @ root.T) * as_tensor(log_scale).exp() + as_tensor(root_trans)


def lbs_deform(skeleton: Skeleton, pose: PoseParams, rest_vertices) -> np.ndarray:
    V = np.asarray(rest_vertices, dtype=np.float64)
    _check_weights(skeleton, len(V))
    if pose.bone_rots.shape != (skeleton.n_bones, 3):
        raise ValueError("pose has the wrong number of bone rotations")
    out = lbs_tensor(skeleton, pose.root_rot, pose.root_trans, np.log(pose.scale), pose.bone_rots, V)
    return out.data


# ---------------------------------------------------------------- losses

def point_loss(source, target):
    """Mean over points of the L1 distance."""
    src, dst = as_tensor(source), as_tensor(target)
    if src.shape != dst.shape:
        raise ValueError(f"point count mismatch {src.shape} vs {dst.shape}")
    return (src - dst).abs().sum(axis=1).mean()


def arap_loss(edges, rest_lengths, deformed):
    """Mean absolute deviation of edge lengths from their rest lengths."""
    pts = as_tensor(deformed)
    edges = np.asarray(edges)
    cur = (pts[edges[:, 0]] - pts[edges[:, 1]]).norm(axis=1)
    return (cur - Tensor(np.asarray(rest_lengths, dtype=pts.dtype))).abs().mean()


def smooth_loss(frames: Sequence):
    """Mean squared displacement between consecutive frames."""
    if len(frames) < 2:
        raise ValueError("smoothing needs at least two frames")
    frames = [as_tensor(fr) for fr in frames]
    n = frames[0].shape[0]
    if any(fr.shape != frames[0].shape for fr in frames):
        raise ValueError("frames must have equal point counts")
    total = None
    for prev, cur in zip(frames[:-1], frames[1:]):
        step = prev - cur
        term = (step * step).sum()
        total = term if total is None else total + term
    return total * (1.0 / (n * (len(frames) - 1)))


# ---------------------------------------------------------------- alignment

@dataclass
class AlignConfig:
    iterations: int = 4000
    lr: float = 0.01
    w_point: float = 1.0
    w_arap: float = 1.0
    w_smooth: float = 0.0
    lr_decay: bool = True


@dataclass
class AlignResult:
    pose: PoseParams
    trace: list = field(default_factory=list)
    bone_history: Optional[list] = None


class _PoseVars:
    def __init__(self, pose: PoseParams):
        self.p = {
            "root_rot": pose.root_rot.copy(),
            "root_trans": pose.root_trans.copy(),
            "log_scale": np.array(np.log(pose.scale)),
            "bone_rots": pose.bone_rots.copy(),
        }
        self.opt = OptimizerState(lr=0.0, weight_decay=0.0)

    def tensors(self):
        return {k: Tensor(v, requires_grad=True) for k, v in self.p.items()}

    def pose(self):
        return PoseParams(self.p["root_rot"], self.p["root_trans"], float(np.exp(self.p["log_scale"])),
                          self.p["bone_rots"])


def _lr(config, it):
    if not config.lr_decay:
        return config.lr
    # cosine decay inside each phase
    half = config.iterations / 2
    frac = (it % half) / half if half else 0.0
    return config.lr * 0.5 * (1 + np.cos(np.pi * frac))


def _step(vars_, T, loss, config, it, phase_two):
    loss.backward()
    grads = {k: T[k].grad for k in ("root_rot", "root_trans", "log_scale")}
    if phase_two:
        grads["bone_rots"] = T["bone_rots"].grad
    vars_.opt.lr = _lr(config, it)
    adamw_step(vars_.p, grads, vars_.opt)


def _correspondence_arrays(src_idx, targets):
    src_idx = np.asarray(src_idx, dtype=np.int64).ravel()
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(src_idx) == 0:
        raise ValueError("no correspondences")
    if len(src_idx) != len(targets):
        raise ValueError("correspondence index and target counts differ")
    return src_idx, targets


def align_pose(skeleton: Skeleton, rest_vertices, edges, src_idx, targets,
               config: AlignConfig = AlignConfig(), init: Optional[PoseParams] = None,
               record_bones: bool = False) -> AlignResult:
    """Fit a pose so that skinned ``rest_vertices[src_idx]`` land on ``targets``.

    The first half of the iterations moves only the root rotation,
    translation and scale; the second half also moves every bone rotation.
    """
    V = np.asarray(rest_vertices, dtype=np.float64)
    _check_weights(skeleton, len(V))
    src_idx, targets = _correspondence_arrays(src_idx, targets)
    edges = np.asarray(edges)
    rest_len = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
    vars_ = _PoseVars(init or PoseParams.identity(skeleton.n_bones))
    half = config.iterations // 2
    trace, history = [], []
    tgt = Tensor(targets)
    for it in range(config.iterations):
        T = vars_.tensors()
        posed = lbs_tensor(skeleton, T["root_rot"], T["root_trans"], T["log_scale"], T["bone_rots"], V)
        loss = point_loss(posed[src_idx], tgt) * config.w_point
        if config.w_arap:
            loss = loss + arap_loss(edges, rest_len, posed) * config.w_arap
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite alignment loss at iteration {it}")
        trace.append(float(loss.data))
        _step(vars_, T, loss, config, it, phase_two=it >= half)
        if record_bones:
            history.append(vars_.p["bone_rots"].copy())
    return AlignResult(vars_.pose(), trace, history if record_bones else None)


def align_sequence(skeleton: Skeleton, rest_vertices, edges, src_idx, targets_per_frame,
                   config: AlignConfig = replace(AlignConfig(), w_smooth=1.0)) -> list:
    """Jointly fit one pose per frame, coupled by temporal smoothing.

    The objective is the per-frame sum of point and ARAP terms plus the
    smoothing term, so with ``w_smooth = 0`` frames decouple exactly.
    """
    V = np.asarray(rest_vertices, dtype=np.float64)
    _check_weights(skeleton, len(V))
    frames = list(targets_per_frame)
    if len(frames) < 2:
        raise ValueError("a sequence needs at least two frames")
    idx_list = src_idx if isinstance(src_idx, (list, tuple)) else [src_idx] * len(frames)
    if len(idx_list) != len(frames):
        raise ValueError("frame count mismatch between correspondences and targets")
    pairs = [_correspondence_arrays(i, t) for i, t in zip(idx_list, frames)]
    edges = np.asarray(edges)
    rest_len = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
    vars_ = [_PoseVars(PoseParams.identity(skeleton.n_bones)) for _ in frames]
    half = config.iterations // 2
    traces = []
    for it in range(config.iterations):
        Ts = [v.tensors() for v in vars_]
        posed = [lbs_tensor(skeleton, T["root_rot"], T["root_trans"], T["log_scale"], T["bone_rots"], V) for T in Ts]
        total = None
        for frame, (si, tg) in zip(posed, pairs):
            term = point_loss(frame[si], Tensor(tg)) * config.w_point
            if config.w_arap:
                term = term + arap_loss(edges, rest_len, frame) * config.w_arap
            total = term if total is None else total + term
        if config.w_smooth:
            total = total + smooth_loss(posed) * config.w_smooth
        if not np.isfinite(total.data):
            raise FloatingPointError(f"non-finite alignment loss at iteration {it}")
        traces.append(float(total.data))
        total.backward()
        for v, T in zip(vars_, Ts):
            grads = {k: T[k].grad for k in ("root_rot", "root_trans", "log_scale")}
            if it >= half:
                grads["bone_rots"] = T["bone_rots"].grad
            v.opt.lr = _lr(config, it)
            adamw_step(v.p, grads, v.opt)
    return [AlignResult(v.pose(), traces) for v in vars_]


# ---------------------------------------------------------------- skinning regression

@dataclass
class SkinningRegressor:
    weight: np.ndarray
    bias: np.ndarray

    def predict(self, features) -> np.ndarray:
        logits = Tensor(np.asarray(features, dtype=np.float64)) @ Tensor(self.weight) + Tensor(self.bias)
        return logits.softmax(axis=1).data


def kfold_indices(n: int, folds: int = 5, seed: int = 0):
    """Contiguous folds over a seeded shuffle; yields ``(train, test)`` index arrays."""
    if folds < 2 or folds > n:
        raise ValueError("need 2 <= folds <= n")
    perm = np.random.default_rng(seed).permutation(n)
    for chunk in np.array_split(np.arange(n), folds):
        test = perm[chunk]
        train = np.setdiff1d(perm, test, assume_unique=True)
        yield np.sort(train), np.sort(test)


def regress_skinning(features, weights, train_idx, test_idx, epochs: int = 2000, lr: float = 0.05,
                     seed: int = 0):
    """Fit a linear map plus softmax to skinning weights by full-batch Adam on MSE.

    Returns ``(regressor, test_mse)``.
    """
    feats = np.asarray(features, dtype=np.float64)
    target = np.asarray(weights, dtype=np.float64)
    if target.ndim != 2 or target.shape[1] < 2:
        raise ValueError("need at least two bones")
    if np.any(np.abs(target.sum(axis=1) - 1) > 1e-6):
        raise ValueError("weight rows must sum to 1")
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if len(train_idx) == 0 or len(test_idx) == 0 or np.intersect1d(train_idx, test_idx).size:
        raise ValueError("degenerate train/test split")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(feats.shape[1])
    params = {"weight": rng.uniform(-bound, bound, (feats.shape[1], target.shape[1])),
              "bias": np.zeros(target.shape[1])}
    opt = OptimizerState(lr=lr, weight_decay=0.0)
    train_x, train_y = Tensor(feats[train_idx]), Tensor(target[train_idx])
    for _ in range(epochs):
        weight, bias = Tensor(params["weight"], True), Tensor(params["bias"], True)
        resid = (train_x @ weight + bias).softmax(axis=1) - train_y
        loss = (resid * resid).mean()
        loss.backward()
        adamw_step(params, {"weight": weight.grad, "bias": bias.grad}, opt)
    reg = SkinningRegressor(params["weight"], params["bias"])
    test_mse = float(((reg.predict(feats[test_idx]) - target[test_idx]) ** 2).mean())
    return reg, test_mse


# ---------------------------------------------------------------- file formats

def sparse_indices(vertices, fraction: float, seed: int = 0) -> np.ndarray:
    """A well-spread subset of ``fraction`` of the vertices (farthest point sampling)."""
    from .mesh import farthest_point_sampling

    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(vertices)
    count = max(1, int(round(fraction * n)))
    return np.sort(farthest_point_sampling(np.asarray(vertices, dtype=np.float64), count, seed=seed))


def _weights_path(path: Path) -> Path:
    return path.with_name(path.name + ".weights.saf")


def write_skeleton(path, skeleton: Skeleton) -> None:
    """Text bone table plus a SAF1 sibling file holding the skinning weights."""
    from .features import write_features

    path = Path(path)
    lines = ["bones"]
    for b in range(skeleton.n_bones):
        name = skeleton.names[b] if b < len(skeleton.names) else f"bone{b}"
        h = [float(c) for c in skeleton.heads[b]]
        lines.append(f"{b} {int(skeleton.parents[b])} {h[0]!r} {h[1]!r} {h[2]!r} {name}")
    lines.append(f"weights {_weights_path(path).name}")
    path.write_text("\n".join(lines) + "\n")
    write_features(skeleton.weights, _weights_path(path))


def read_skeleton(path) -> Skeleton:
    from .features import read_features

    path = Path(path)
    rows = [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0] != ["bones"]:
        raise ValueError(f"{path}: skeleton file must start with a 'bones' section")
    parents, heads, names, weights_name = [], [], [], None
    for lineno, r in enumerate(rows[1:], start=2):
        if r[0] == "weights":
            weights_name = r[1]
            continue
        if len(r) < 5:
            raise ValueError(f"{path}:{lineno}: expected 'id parent x y z [name]'")
        if int(r[0]) != len(parents):
            raise ValueError(f"{path}:{lineno}: bone ids must be consecutive from 0")
        parents.append(int(r[1]))
        heads.append([float(c) for c in r[2:5]])
        names.append(r[5] if len(r) > 5 else f"bone{r[0]}")
    if weights_name is None:
        raise ValueError(f"{path}: missing 'weights' line")
    weights = read_features(path.with_name(weights_name)).astype(np.float64)
    return Skeleton(np.array(parents), np.array(heads), weights, tuple(names))


POSE_HEADER = ["bone", "rx", "ry", "rz", "tx", "ty", "tz", "scale"]


def write_pose_csv(path, pose: PoseParams) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_HEADER)
        w.writerow(["root"] + [repr(float(c)) for c in pose.root_rot]
                   + [repr(float(c)) for c in pose.root_trans] + [repr(float(pose.scale))])
        for b, r in enumerate(pose.bone_rots):
            w.writerow([b] + [repr(float(c)) for c in r] + ["", "", "", ""])


def read_pose_csv(path) -> PoseParams:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != POSE_HEADER:
        raise ValueError(f"{path}: unexpected pose header")
    root = [r for r in rows[1:] if r[0] == "root"]
    if len(root) != 1:
        raise ValueError(f"{path}: expected exactly one root row")
    r = root[0]
    bones = sorted((int(row[0]), [float(c) for c in row[1:4]]) for row in rows[1:] if row[0] != "root")
    if [b for b, _ in bones] != list(range(len(bones))):
        raise ValueError(f"{path}: bone ids must be consecutive from 0")
    return PoseParams([float(c) for c in r[1:4]], [float(c) for c in r[4:7]], float(r[7]),
                      np.array([v for _, v in bones]).reshape(-1, 3))
