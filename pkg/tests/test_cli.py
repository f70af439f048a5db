import json
import subprocess
import sys

import numpy as np
import pytest

from geodistill.cli import run
from geodistill.features import read_features
from geodistill.mesh import load_mesh
from geodistill.synth import write_correspondence_csv


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run(["synth-quadruped", "--out", str(d), "--count", "2", "--seed", "3"]) == 0
    return d


def _err(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def test_synth_is_bitwise_reproducible(synth, tmp_path):
    assert run(["synth-quadruped", "--out", str(tmp_path), "--count", "2", "--seed", "3"]) == 0
    assert _files(tmp_path) == _files(synth)
    names = set(_files(synth))
    for suffix in (".ply", ".features.saf", ".skeleton.txt", ".mirror.csv", ".posed.ply",
                   ".posed.pose.csv", ".gt.csv"):
        assert f"quadruped_1{suffix}" in names


def test_manifest_fields(synth):
    m = json.loads((synth / "manifest.json").read_text())
    assert {"command", "argv", "inputs", "config", "config_hash", "seed", "version"} <= set(m)
    assert m["command"] == "synth-quadruped" and m["seed"] == 3 and m["config"]["count"] == 2


def test_perfect_match_evaluates_to_zero(synth, tmp_path, capsys):
    f = str(synth / "quadruped_0.features.saf")
    assert run(["match", "--out", str(tmp_path), "--features", f, f]) == 0
    mesh = load_mesh(synth / "quadruped_0.ply")
    gt = tmp_path / "self_gt.csv"
    write_correspondence_csv(gt, np.arange(mesh.n_vertices), mesh.vertices)
    capsys.readouterr()
    assert run(["eval", "--out", str(tmp_path), "--matches", str(tmp_path / "matches.csv"),
                "--mesh", str(synth / "quadruped_0.ply"), "--ground-truth", str(gt)]) == 0
    assert "err=0.0 acc=100.0" in capsys.readouterr().out
    report = dict(line.split(",") for line in (tmp_path / "report.csv").read_text().split()[1:])
    assert float(report["err"]) == 0.0 and float(report["acc"]) == 100.0
    assert (tmp_path / "accuracy_curve.csv").is_file()


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert run(["synth-icosphere", "--out", str(tmp_path), "--bogus"]) == 2
    e = _err(capsys)
    assert e["exit_code"] == 2 and e["error"] == "usage"


def test_missing_input(tmp_path, capsys):
    assert run(["pca", "--out", str(tmp_path), "--features", str(tmp_path / "nope.saf")]) == 3
    assert _err(capsys)["exit_code"] == 3


def test_bad_config(synth, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("anchors=4\nnot_a_key=1\n")
    argv = ["train", "--out", str(tmp_path), "--config", str(cfg), "--mesh", str(synth / "quadruped_0.ply"),
            "--features", str(synth / "quadruped_0.features.saf")]
    assert run(argv) == 4
    assert _err(capsys)["error"] == "config"
    cfg.write_text("anchors=four\n")
    assert run(argv) == 4


def test_config_precedence(synth, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("anchors=4\niterations=3\nembed_dim=4\nlr=0.5\n")
    out = tmp_path / "t"
    assert run(["train", "--out", str(out), "--config", str(cfg), "--lr", "0.001",
                "--mesh", str(synth / "quadruped_0.ply"),
                "--features", str(synth / "quadruped_0.features.saf")]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["lr"] == 0.001  # flag beats file
    assert m["config"]["anchors"] == 4  # file beats default
    assert m["config"]["weight_decay"] == 0.01  # default
    assert {i["path"] for i in m["inputs"]} >= {str(cfg)}
    assert (out / "checkpoint.safc").is_file() and (out / "loss_log.csv").is_file()
    assert run(["embed", "--out", str(out), "--checkpoint", str(out / "checkpoint.safc"),
                "--features", str(synth / "quadruped_0.features.saf")]) == 0
    assert read_features(out / "embedded.saf").shape[1] == 4


def test_match_threads_invariant(synth, tmp_path):
    f0, f1 = (str(synth / f"quadruped_{k}.features.saf") for k in (0, 1))
    outs = []
    for t in (1, 3):
        d = tmp_path / f"t{t}"
        assert run(["match", "--out", str(d), "--threads", str(t), "--features", f0, f1,
                    "--mesh", str(synth / "quadruped_0.ply"), "--samples", "300"]) == 0
        outs.append((d / "matches.csv").read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 301


def test_geodesic_and_segment(synth, tmp_path):
    mesh = str(synth / "quadruped_0.ply")
    assert run(["geodesic", "--out", str(tmp_path), "--mesh", mesh, "--anchors", "0,5"]) == 0
    g = read_features(tmp_path / "geodesic.saf")
    assert g.shape[1] == 2 and g[0, 0] == 0.0
    assert read_features(tmp_path / "geodesic_rescaled.saf").max() == 1.0
    f = str(synth / "quadruped_0.features.saf")
    assert run(["segment", "--out", str(tmp_path), "--features", f, "--k", "4", "--mesh", mesh,
                "--target-features", str(synth / "quadruped_1.features.saf")]) == 0
    for name in ("labels.csv", "centroids.saf", "kmeans_objective.csv", "segmented.ply", "target_labels.csv"):
        assert (tmp_path / name).is_file()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geodistill", "synth-icosphere", "--out", str(tmp_path),
                           "--subdivisions", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "icosphere.ply").is_file()
    proc = subprocess.run([sys.executable, "-m", "geodistill", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 2
