"""Self-supervised training of the geodesic-preserving autoencoder."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import parse_key_values
from .geodesics import GeodesicField, HeatGeodesicSolver, rescale_distances
from .losses import (LossWeights, ablation_loss, combined_loss, contrastive_loss,
                     reconstruction_loss)
from .mesh import Mesh, farthest_point_sampling
from .network import (Autoencoder, EmaState, OptimizerState, adamw_step, deployed_model,
                      ema_maybe_snapshot, ema_update, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

VARIANTS = ("full", "only_Lc", "only_Lr", "RGL", "NGL", "GSL")
_EUCLIDEAN = ("RGL", "NGL")


def canonical_variant(name: str) -> str:
    key = name.replace("-", "_").lower()
    for v in VARIANTS:
        if v.lower() == key:
            return v
    raise ValueError(f"unknown loss variant {name!r}; expected one of {', '.join(VARIANTS)}")


@dataclass
class TrainConfig:
    anchors: int = 100
    iterations: int = 50000
    lr: float = 1e-4
    weight_decay: float = 0.01
    w_r: float = 1.0
    w_c: float = 1.0
    embed_dim: int = 256
    seed: int = 0
    validation_interval: int = 500
    validation_seed: int = 1
    variant: str = "full"
    ema_decay: float = 0.999
    max_vertices: int = 20000
    time_scale: float = 1.0
    recon_warmup: int = 0

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.anchors < 1:
            raise ValueError("anchors must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")
        if self.recon_warmup < 0:
            raise ValueError("recon_warmup must be >= 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.weights  # validates w_r / w_c

    @property
    def weights(self) -> LossWeights:
        if self.variant == "only_Lc":
            return LossWeights(w_r=0.0, w_c=self.w_c)
        if self.variant == "only_Lr":
            return LossWeights(w_r=self.w_r, w_c=0.0)
        return LossWeights(w_r=self.w_r, w_c=self.w_c)

    def weights_at(self, iteration: int) -> LossWeights:
        """Loss weights for one step; ``recon_warmup`` ramps w_r linearly from 0."""
        w = self.weights
        if self.recon_warmup and w.w_c > 0 and iteration < self.recon_warmup:
            return LossWeights(w_r=w.w_r * iteration / self.recon_warmup, w_c=w.w_c)
        return w

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            kw[key] = raw if t == "str" else (int(raw) if t == "int" else float(raw))
        return cls(**kw)

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "TrainConfig":
        values = parse_key_values(Path(path).read_text())
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class TrainSample:
    """One step's batch: vertex subset, anchors (positions inside the subset) and geodesics."""

    rows: np.ndarray
    anchors: np.ndarray
    field: GeodesicField


@dataclass
class TrainRun:
    config: TrainConfig
    model: Autoencoder
    optimizer: OptimizerState
    ema: EmaState
    loss_log: list = field(default_factory=list)  # (iteration, total, L_c, L_r)
    validation_log: list = field(default_factory=list)  # (iteration, loss)
    backward_passes: Counter = field(default_factory=Counter)
    checkpoint_path: Optional[Path] = None

    def deployed(self) -> Autoencoder:
        return deployed_model(self.model, self.ema)

    def write_log(self, path) -> None:
        val = dict(self.validation_log)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "total", "L_c", "L_r", "validation"])
            for it, total, lc, lr in self.loss_log:
                v = val.get(it)
                w.writerow([it, repr(total), "" if lc is None else repr(lc), "" if lr is None else repr(lr),
                            "" if v is None else repr(v)])


class _MeshCache:
    """Per-mesh heat solver, created on first use and reused across steps."""

    def __init__(self, time_scale):
        self.time_scale = time_scale
        self._solvers = {}

    def solver(self, key, mesh):
        s = self._solvers.get(key)
        if s is None:
            s = self._solvers[key] = HeatGeodesicSolver(mesh, self.time_scale)
        return s


def _check_pair(mesh: Mesh, base):
    base = np.asarray(base)
    if base.ndim != 2 or base.shape[0] != mesh.n_vertices:
        raise ValueError(f"feature rows {base.shape[0] if base.ndim else 0} != vertex count {mesh.n_vertices}")
    norms = np.linalg.norm(base.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError("base features must be unit-normalized rows")
    return base


def prepare_sample(mesh: Mesh, base, config: TrainConfig, iteration: int = 0,
                   solver: Optional[HeatGeodesicSolver] = None, rng=None) -> TrainSample:
    """Pick the vertex batch and FPS anchors for one step and compute their geodesics."""
    _check_pair(mesh, base)
    n = mesh.n_vertices
    if config.anchors > n:
        raise ValueError(f"anchor count {config.anchors} exceeds vertex count {n}")
    rng = rng if rng is not None else np.random.default_rng([config.seed, iteration])
    if n > config.max_vertices:
        rows = np.sort(rng.choice(n, config.max_vertices, replace=False))
    else:
        rows = np.arange(n)
    if config.anchors > len(rows):
        raise ValueError(f"anchor count {config.anchors} exceeds batch size {len(rows)}")
    start = int(rng.integers(len(rows)))
    local = farthest_point_sampling(mesh.vertices[rows], config.anchors, start=start)
    solver = solver or HeatGeodesicSolver(mesh, config.time_scale)
    dist = solver.distances(rows[local])[rows]
    gf = GeodesicField(anchors=rows[local], distances=dist)
    return TrainSample(rows=rows, anchors=local, field=rescale_distances(gf))


def _objective(model: Autoencoder, P, base_rows, sample: TrainSample, config: TrainConfig,
               weights: Optional[LossWeights] = None):
    weights = weights or config.weights
    x = base_rows
    emb = model.encode(x, P)
    l_r = None
    if weights.w_r > 0:
        l_r = reconstruction_loss(x, model.decode(emb, P))
    variant = config.variant
    if variant in ("full", "only_Lc"):
        l_geo = contrastive_loss(emb, sample.anchors, sample.field.rescaled)
    elif variant == "only_Lr":
        l_geo = None
    elif variant in _EUCLIDEAN:
        l_geo = ablation_loss(variant, emb, sample.anchors, sample.field.distances, reduction="mean")
    else:
        l_geo = ablation_loss(variant, emb, sample.anchors, sample.field.distances)
    total = combined_loss(weights, l_geo, l_r)
    return total, l_geo, l_r


def _validate(model, P, val_sets, val_samples, config):
    losses = []
    for (mesh, base), sample in zip(val_sets, val_samples):
        x = np.asarray(base, dtype=model.dtype)[sample.rows]
        total, _, _ = _objective(model, P, x, sample, config)
        losses.append(total.value)
    return math.fsum(losses) / len(losses)


def train(training: Sequence, config: TrainConfig, validation: Sequence = (), out_dir=None,
          model: Optional[Autoencoder] = None) -> TrainRun:
    """Train on ``training``, a sequence of ``(mesh, base_features)`` pairs.

    Validation pairs never receive gradients; every ``validation_interval``
    steps their loss under the EMA weights decides whether the EMA is
    snapshotted as the deployed model.
    """
    training = [(m, _check_pair(m, f)) for m, f in training]
    validation = [(m, _check_pair(m, f)) for m, f in validation]
    if not training:
        raise ValueError("need at least one training mesh")
    train_ids = {id(m) for m, _ in training}
    if any(id(m) in train_ids for m, _ in validation):
        raise ValueError("validation meshes must be disjoint from training meshes")
    dims = {f.shape[1] for _, f in training + validation}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    if model is None:
        model = Autoencoder(dims.pop(), config.embed_dim, seed=config.seed,
                            normalize_embedding=config.variant not in _EUCLIDEAN)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    ema = EmaState.from_params(model.params, config.ema_decay)
    run = TrainRun(config, model, opt, ema)
    cache = _MeshCache(config.time_scale)
    bases = [np.asarray(f, dtype=model.dtype) for _, f in training]

    val_samples = []
    for j, (m, f) in enumerate(validation):
        rng = np.random.default_rng([config.validation_seed, j])
        val_samples.append(prepare_sample(m, f, config, solver=cache.solver(("val", j), m), rng=rng))
    if not validation:
        log.warning("no validation meshes; the final EMA weights will be deployed")

    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, it])
        k = int(rng.integers(len(training)))
        mesh = training[k][0]
        sample = prepare_sample(mesh, bases[k], config, it, cache.solver(("train", k), mesh), rng=rng)
        P = model.tensors(requires_grad=True)
        total, l_geo, l_r = _objective(model, P, bases[k][sample.rows], sample, config,
                                       config.weights_at(it))
        if not np.isfinite(total.value):
            raise FloatingPointError(
                f"non-finite loss at iteration {it} on training mesh {k}: {total.breakdown}")
        total.tensor.backward()
        run.backward_passes[("train", k)] += 1
        adamw_step(model.params, {n: t.grad for n, t in P.items()}, opt)
        ema_update(ema, model.params)
        run.loss_log.append((it, total.value, None if l_geo is None else l_geo.value,
                             None if l_r is None else l_r.value))
        last = it == config.iterations - 1
        if validation and ((it + 1) % config.validation_interval == 0 or last):
            shadow = {n: _const(v) for n, v in ema.shadow.items()}
            vloss = _validate(model, shadow, validation, val_samples, config)
            run.validation_log.append((it, vloss))
            if ema_maybe_snapshot(ema, vloss, tag=it):
                log.info("iteration %d: validation %.6f (snapshot)", it, vloss)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        run.checkpoint_path = out / "checkpoint.safc"
        save_checkpoint(model, opt, ema, run.checkpoint_path, extra={"config": asdict(config)})
        run.write_log(out / "loss_log.csv")
    return run


def _const(arr):
    from .autodiff import Tensor

    return Tensor(arr)


def embed(checkpoint, base) -> np.ndarray:
    """Surface-aware features for ``base`` from the deployed weights of ``checkpoint``.

    ``checkpoint`` is a path, a :class:`TrainRun` or an :class:`Autoencoder`.
    """
    if isinstance(checkpoint, TrainRun):
        model = checkpoint.deployed()
    elif isinstance(checkpoint, Autoencoder):
        model = checkpoint
    else:
        m, _, ema, _ = load_checkpoint(checkpoint)
        model = deployed_model(m, ema)
    base = np.asarray(base)
    if base.ndim != 2 or base.shape[1] != model.input_dim:
        raise ValueError(f"feature dim {base.shape[-1]} does not match checkpoint input dim {model.input_dim}")
    return model.encode(base.astype(model.dtype)).data
