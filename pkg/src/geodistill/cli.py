"""Command-line entry point: one subcommand per pipeline stage.

Every run writes ``manifest.json`` into ``--out`` (inputs with hashes, the
effective config, seed and toolkit version). Failures print one JSON line
``{"error": kind, "exit_code": n, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .features import parse_key_values, read_features, read_image_feature_map, write_features

log = logging.getLogger("geodistill")

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4

EVAL_SEED = 0
EVAL_SAMPLES = 1024


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


# ---------------------------------------------------------------- helpers

class _Run:
    """Collects inputs and effective config for the manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs = []
        self.config = {}
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise CliError("missing-input", f"input file not found: {p}", EXIT_MISSING_INPUT)
        self.inputs.append(p)
        return p

    def write_manifest(self, argv):
        cfg = json.dumps(self.config, sort_keys=True, default=str)
        manifest = {
            "command": self.args.command,
            "argv": list(argv),
            "inputs": [{"path": str(p), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                       for p in self.inputs],
            "config": self.config,
            "config_hash": hashlib.sha256(cfg.encode()).hexdigest(),
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _read_config(run: _Run):
    if not run.args.config:
        return {}
    path = run.input(run.args.config)
    try:
        return parse_key_values(path.read_text())
    except ValueError as exc:
        raise CliError("config", f"{path}: {exc}", EXIT_CONFIG) from exc


def _build_config(cls, file_values: dict, overrides: dict):
    """Flag > config file > default."""
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(file_values) - names)
    if unknown:
        raise CliError("config", f"unknown config key(s): {', '.join(unknown)}", EXIT_CONFIG)
    values = {k: v for k, v in file_values.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        if hasattr(cls, "from_mapping"):
            return cls.from_mapping({k: str(v) for k, v in values.items()})
        types = {f.name: f.type for f in fields(cls)}
        conv = {}
        for k, v in values.items():
            t = types[k]
            if t == "bool":
                conv[k] = str(v).lower() in ("1", "true", "yes")
            elif t == "int":
                conv[k] = int(v)
            elif t == "float":
                conv[k] = float(v)
            else:
                conv[k] = v
        return cls(**conv)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from exc


def _load_mesh(run, path):
    from .mesh import load_mesh

    return load_mesh(run.input(path))


def _load_features(run, path):
    return read_features(run.input(path))


def _save_mesh(mesh, path):
    from .mesh import save_mesh

    save_mesh(mesh, path)


def _write_mirror_csv(path, mirror):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "mirror", "side", "part"])
        for i, (m, s, p) in enumerate(zip(mirror.mirror, mirror.side, mirror.part)):
            w.writerow([i, int(m), int(s), int(p)])


def _label_colors(labels):
    rng = np.random.default_rng(12345)
    palette = rng.uniform(0.15, 0.95, (int(labels.max()) + 1, 3))
    return palette[labels]


def _write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])


# ---------------------------------------------------------------- subcommands

def cmd_synth_icosphere(run, a):
    from .synth import make_icosphere

    run.config = {"subdivisions": a.subdivisions, "radius": a.radius}
    _save_mesh(make_icosphere(a.subdivisions, a.radius), run.out / "icosphere.ply")


def cmd_synth_quadruped(run, a):
    from .pose import write_pose_csv, write_skeleton, lbs_deform
    from .synth import FeatureRecipe, quadruped_suite, random_pose, write_correspondence_csv

    recipe = FeatureRecipe(kind=a.recipe, dim=a.dim, noise=a.noise, side_cue=a.side_cue)
    run.config = {"count": a.count, **asdict(recipe)}
    for k, shape in enumerate(quadruped_suite(a.count, recipe, seed=a.seed)):
        stem = run.out / f"quadruped_{k}"
        _save_mesh(shape.mesh, f"{stem}.ply")
        write_features(shape.features, f"{stem}.features.saf", meta={"recipe": recipe.kind, "seed": a.seed})
        write_skeleton(f"{stem}.skeleton.txt", shape.skeleton)
        _write_mirror_csv(f"{stem}.mirror.csv", shape.mirror)
        pose = random_pose(shape.skeleton.n_bones, seed=a.seed * 1000 + 500 + k)
        posed = shape.mesh.with_vertices(lbs_deform(shape.skeleton, pose, shape.mesh.vertices))
        _save_mesh(posed, f"{stem}.posed.ply")
        write_pose_csv(f"{stem}.posed.pose.csv", pose)
        write_correspondence_csv(f"{stem}.gt.csv", np.arange(posed.n_vertices), posed.vertices)


def _parse_anchors(text):
    """An anchor count (FPS) or a comma-separated list of vertex ids."""
    if text is None:
        return 1
    if "," in text:
        return np.array([int(t) for t in text.split(",") if t.strip()])
    return int(text)


def cmd_geodesic(run, a):
    from .geodesics import heat_geodesic, rescale_distances
    from .mesh import farthest_point_sampling

    mesh = _load_mesh(run, a.mesh)
    spec = _parse_anchors(a.anchors)
    anchors = farthest_point_sampling(mesh, spec, seed=a.seed) if isinstance(spec, int) else spec
    run.config = {"anchors": [int(x) for x in anchors], "time_scale": a.time_scale}
    field = rescale_distances(heat_geodesic(mesh, anchors, a.time_scale))
    write_features(field.distances, run.out / "geodesic.saf", meta={"anchors": ",".join(map(str, anchors))})
    write_features(field.rescaled, run.out / "geodesic_rescaled.saf")


def cmd_train(run, a):
    from .trainer import TrainConfig, train

    if len(a.mesh) != len(a.features):
        raise CliError("usage", "--mesh and --features need the same number of files", EXIT_USAGE)
    if len(a.val_mesh) != len(a.val_features):
        raise CliError("usage", "--val-mesh and --val-features need the same number of files", EXIT_USAGE)
    cfg = _build_config(TrainConfig, _read_config(run), {
        "anchors": a.anchors, "variant": a.loss, "seed": a.seed, "iterations": a.iterations,
        "lr": a.lr, "embed_dim": a.embed_dim,
    })
    run.config = asdict(cfg)
    training = [(_load_mesh(run, m), _load_features(run, f)) for m, f in zip(a.mesh, a.features)]
    validation = [(_load_mesh(run, m), _load_features(run, f)) for m, f in zip(a.val_mesh, a.val_features)]
    train(training, cfg, validation, out_dir=run.out)
    (run.out / "config.txt").write_text(cfg.to_text())


def cmd_embed(run, a):
    from .trainer import embed

    out = embed(run.input(a.checkpoint), _load_features(run, a.features))
    write_features(out, run.out / "embedded.saf")


def _eval_samples(mesh, count):
    from .mesh import farthest_point_sampling

    if mesh.n_vertices <= count:
        return np.arange(mesh.n_vertices)
    return np.sort(farthest_point_sampling(mesh, count, seed=EVAL_SEED))


def cmd_match(run, a):
    from .matching import match_points, write_correspondence_csv

    if len(a.features) != 2:
        raise CliError("usage", "match needs --features SOURCE TARGET", EXIT_USAGE)
    src, tgt = (_load_features(run, p) for p in a.features)
    sel = None
    if a.mesh:
        sel = _eval_samples(_load_mesh(run, a.mesh), a.samples)
    run.config = {"samples": None if sel is None else len(sel), "eval_seed": EVAL_SEED, "threads": a.threads}
    corr = match_points(src, tgt, source_indices=sel, threads=a.threads)
    write_correspondence_csv(run.out / "matches.csv", corr)


def cmd_eval(run, a):
    from .matching import evaluate, read_match_csv, write_curve_csv, write_report_csv
    from .synth import read_correspondence_csv

    corr = read_match_csv(run.input(a.matches))
    target = _load_mesh(run, a.mesh)
    gt_idx, gt_pos = read_correspondence_csv(run.input(a.ground_truth))
    lookup = {int(i): k for k, i in enumerate(gt_idx)}
    missing = [int(s) for s in corr.source if int(s) not in lookup]
    if missing:
        raise CliError("input", f"no ground truth for source index {missing[0]}", EXIT_FAILURE)
    gt = gt_pos[[lookup[int(s)] for s in corr.source]]
    run.config = {"epsilon": a.epsilon}
    report = evaluate(corr, target, gt, a.epsilon)
    write_report_csv(run.out / "report.csv", report)
    write_curve_csv(run.out / "accuracy_curve.csv", report)
    print(f"err={report.err!r} acc={report.acc!r}")


def cmd_segment(run, a):
    from .matching import kmeans, segment_by_centroids

    feats = _load_features(run, a.features)
    run.config = {"k": a.k}
    res = kmeans(feats, a.k, seed=a.seed)
    _write_labels(run.out / "labels.csv", res.labels)
    write_features(res.centroids, run.out / "centroids.saf")
    with open(run.out / "kmeans_objective.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "objective"])
        for i, v in enumerate(res.objective, start=1):
            w.writerow([i, repr(v)])
    if a.mesh:
        _save_mesh(_load_mesh(run, a.mesh).with_colors(_label_colors(res.labels)), run.out / "segmented.ply")
    if a.target_features:
        labels = segment_by_centroids(_load_features(run, a.target_features), res.centroids)
        _write_labels(run.out / "target_labels.csv", labels)
        if a.target_mesh:
            _save_mesh(_load_mesh(run, a.target_mesh).with_colors(_label_colors(labels)),
                       run.out / "target_segmented.ply")


def cmd_pca(run, a):
    from .matching import pca_project

    res = pca_project(_load_features(run, a.features), 2)
    with open(run.out / "pca.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "pc1", "pc2"])
        for i, (x, y) in enumerate(res.projection):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(run.out / "pca_variance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "variance", "ratio"])
        for i, (v, r) in enumerate(zip(res.explained_variance, res.explained_ratio), start=1):
            w.writerow([i, repr(float(v)), repr(float(r))])
    if a.mesh:
        p = res.projection
        span = np.where(np.ptp(p, axis=0) > 0, np.ptp(p, axis=0), 1.0)
        uv = (p - p.min(axis=0)) / span
        colors = np.stack([uv[:, 0], uv[:, 1], 1.0 - uv[:, 0]], axis=1)
        _save_mesh(_load_mesh(run, a.mesh).with_colors(colors), run.out / "pca.ply")


def cmd_texture_2d3d(run, a):
    from .matching import texture_from_image

    mesh = _load_mesh(run, a.mesh)
    image = read_image_feature_map(run.input(a.image_features), run.input(a.mask), run.input(a.image))
    colors = texture_from_image(_load_features(run, a.features), image, threads=a.threads)
    _save_mesh(mesh.with_colors(colors), run.out / "textured.ply")


def cmd_texture_3d3d(run, a):
    from .matching import texture_mesh_to_mesh

    src = _load_mesh(run, a.mesh)
    if src.colors is None:
        raise CliError("input", f"{a.mesh} has no vertex colors", EXIT_FAILURE)
    tgt = _load_mesh(run, a.target_mesh)
    colors = texture_mesh_to_mesh(_load_features(run, a.features), src.colors,
                                  _load_features(run, a.target_features), threads=a.threads)
    _save_mesh(tgt.with_colors(colors), run.out / "textured.ply")


def _correspondences(run, a, rest_mesh, target_mesh, features_path, target_features_path, gt_path):
    """Source indices and target positions from exact ground truth or feature matching."""
    from .matching import match_points
    from .pose import sparse_indices
    from .synth import read_correspondence_csv

    if gt_path:
        idx, pos = read_correspondence_csv(run.input(gt_path))
    elif features_path and target_features_path:
        corr = match_points(_load_features(run, features_path), _load_features(run, target_features_path),
                            threads=a.threads)
        idx, pos = corr.source, target_mesh.vertices[corr.target]
    else:
        raise CliError("usage", "give --correspondences or both feature files", EXIT_USAGE)
    if a.sparse is not None:
        keep = sparse_indices(rest_mesh.vertices, a.sparse, seed=a.seed)
        mask = np.isin(idx, keep)
        idx, pos = idx[mask], pos[mask]
    return idx, pos


def _align_config(run, a, defaults):
    from .pose import AlignConfig

    file_values = _read_config(run)
    base = {k: v for k, v in defaults.items() if k not in file_values}
    cfg = _build_config(AlignConfig, {**base, **file_values}, {"iterations": a.iterations, "lr": a.lr})
    run.config = {**asdict(cfg), "sparse": a.sparse}
    return cfg


def cmd_align(run, a):
    from .pose import align_pose, lbs_deform, read_skeleton, write_pose_csv

    sk = read_skeleton(run.input(a.skeleton))
    rest = _load_mesh(run, a.mesh)
    target = _load_mesh(run, a.target_mesh)
    cfg = _align_config(run, a, {})
    idx, pos = _correspondences(run, a, rest, target, a.features, a.target_features, a.correspondences)
    res = align_pose(sk, rest.vertices, rest.edges(), idx, pos, cfg)
    write_pose_csv(run.out / "pose.csv", res.pose)
    _save_mesh(rest.with_vertices(lbs_deform(sk, res.pose, rest.vertices)), run.out / "aligned.ply")
    _write_trace(run.out / "loss_trace.csv", res.trace)


def cmd_align_seq(run, a):
    from .pose import align_sequence, lbs_deform, read_skeleton, write_pose_csv

    sk = read_skeleton(run.input(a.skeleton))
    rest = _load_mesh(run, a.mesh)
    targets = [_load_mesh(run, p) for p in a.target_mesh]
    n = len(targets)
    tf = a.target_features or [None] * n
    gts = a.correspondences or [None] * n
    if len(tf) != n or len(gts) != n:
        raise CliError("usage", "frame count mismatch between targets and correspondences", EXIT_USAGE)
    cfg = _align_config(run, a, {"w_smooth": "1.0"})
    pairs = [_correspondences(run, a, rest, t, a.features, f, g) for t, f, g in zip(targets, tf, gts)]
    results = align_sequence(sk, rest.vertices, rest.edges(), [p[0] for p in pairs], [p[1] for p in pairs], cfg)
    for t, res in enumerate(results):
        write_pose_csv(run.out / f"pose_{t:04d}.csv", res.pose)
        _save_mesh(rest.with_vertices(lbs_deform(sk, res.pose, rest.vertices)), run.out / f"aligned_{t:04d}.ply")
    _write_trace(run.out / "loss_trace.csv", results[0].trace)


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(v)])


def cmd_regress_skinning(run, a):
    from .pose import kfold_indices, read_skeleton, regress_skinning

    sk = read_skeleton(run.input(a.skeleton))
    feats = _load_features(run, a.features)
    run.config = {"folds": a.folds, "epochs": a.epochs, "lr": a.lr or 0.05}
    rows = []
    for k, (tr, te) in enumerate(kfold_indices(len(feats), a.folds, seed=a.seed)):
        _, mse = regress_skinning(feats, sk.weights, tr, te, epochs=a.epochs, lr=a.lr or 0.05, seed=a.seed)
        rows.append((k, mse))
    with open(run.out / "skinning_mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "test_mse"])
        for k, mse in rows:
            w.writerow([k, repr(mse)])
    print(f"mean_test_mse={float(np.mean([m for _, m in rows]))!r}")


def cmd_gradcheck(run, a):
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(seed=a.seed)
    run.config = {"tolerance": TOLERANCE}
    with open(run.out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["objective", "coordinates", "max_rel_error", "passed"])
        for r in results:
            w.writerow([r.name, r.coordinates, repr(r.max_rel_error), int(r.passed)])
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
    if not all(r.passed for r in results):
        raise CliError("gradcheck", "finite-difference check failed", EXIT_FAILURE)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geodistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geodistill {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--threads", type=int, default=1)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-icosphere", cmd_synth_icosphere, "write an icosphere mesh")
    sp.add_argument("--subdivisions", type=int, default=3)
    sp.add_argument("--radius", type=float, default=1.0)

    sp = add("synth-quadruped", cmd_synth_quadruped, "write synthetic quadrupeds with features")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--recipe", default="symmetric-semantic", choices=["symmetric-semantic", "positional"])
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--side-cue", type=float, default=0.025)

    sp = add("geodesic", cmd_geodesic, "dump heat-method geodesic fields")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--anchors", help="anchor count (FPS) or comma-separated vertex ids, e.g. 0,5")
    sp.add_argument("--time-scale", type=float, default=1.0)

    sp = add("train", cmd_train, "train the autoencoder")
    sp.add_argument("--mesh", nargs="+", required=True)
    sp.add_argument("--features", nargs="+", required=True)
    sp.add_argument("--val-mesh", nargs="*", default=[])
    sp.add_argument("--val-features", nargs="*", default=[])
    sp.add_argument("--anchors", type=int)
    sp.add_argument("--loss", choices=["full", "only-lc", "only-lr", "rgl", "ngl", "gsl"])
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--embed-dim", type=int)

    sp = add("embed", cmd_embed, "compute surface-aware features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)

    sp = add("match", cmd_match, "cosine matching between two feature files")
    sp.add_argument("--features", nargs="+", required=True, help="SOURCE TARGET")
    sp.add_argument("--mesh", help="source mesh; enables FPS evaluation sampling")
    sp.add_argument("--samples", type=int, default=EVAL_SAMPLES)

    sp = add("eval", cmd_eval, "correspondence error and accuracy")
    sp.add_argument("--matches", required=True)
    sp.add_argument("--mesh", required=True, help="target mesh")
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--epsilon", type=float, default=0.01)

    sp = add("segment", cmd_segment, "k-means segmentation and centroid transfer")
    sp.add_argument("--features", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--mesh")
    sp.add_argument("--target-features")
    sp.add_argument("--target-mesh")

    sp = add("pca", cmd_pca, "2-D PCA of features")
    sp.add_argument("--features", required=True)
    sp.add_argument("--mesh")

    sp = add("texture-2d3d", cmd_texture_2d3d, "color a mesh from an image feature map")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--image-features", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--image", required=True)

    sp = add("texture-3d3d", cmd_texture_3d3d, "transfer vertex colors between meshes")
    sp.add_argument("--mesh", required=True, help="colored source mesh")
    sp.add_argument("--features", required=True)
    sp.add_argument("--target-mesh", required=True)
    sp.add_argument("--target-features", required=True)

    for name, fn, many in (("align", cmd_align, False), ("align-seq", cmd_align_seq, True)):
        sp = add(name, fn, "fit skeleton pose(s) to targets")
        sp.add_argument("--skeleton", required=True)
        sp.add_argument("--mesh", required=True, help="rest mesh")
        sp.add_argument("--target-mesh", required=True, nargs="+" if many else None)
        sp.add_argument("--features")
        sp.add_argument("--target-features", nargs="+" if many else None)
        sp.add_argument("--correspondences", nargs="+" if many else None)
        sp.add_argument("--sparse", type=float, help="fit only this fraction of vertices")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--lr", type=float)

    sp = add("regress-skinning", cmd_regress_skinning, "k-fold skinning-weight regression")
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=2000)
    sp.add_argument("--lr", type=float)

    add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    return p


def _setup_logging():
    level = os.environ.get("GEODISTILL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        r = _Run(args)
        args.func(r, args)
        r.write_manifest(argv)
        return 0
    except CliError as exc:
        err = exc
    except FileNotFoundError as exc:
        err = CliError("missing-input", str(exc), EXIT_MISSING_INPUT)
    except (ValueError, FloatingPointError, KeyError, IndexError) as exc:
        err = CliError(type(exc).__name__, str(exc), EXIT_FAILURE)
    print(json.dumps({"error": err.kind, "exit_code": err.code, "message": str(err)}), file=sys.stderr)
    return err.code


def main():
    sys.exit(run())
