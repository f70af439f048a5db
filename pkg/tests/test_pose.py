import math
from dataclasses import replace

import numpy as np
import pytest

from geodistill.pose import (POSE_HEADER, AlignConfig, PoseParams, align_pose, align_sequence, arap_loss,
                             kfold_indices, lbs_deform, point_loss, read_pose_csv, read_skeleton,
                             regress_skinning, smooth_loss, sparse_indices, write_pose_csv, write_skeleton)
from geodistill.synth import Skeleton, make_quadruped, random_pose


@pytest.fixture(scope="module")
def quad():
    return make_quadruped()


def _one_bone():
    return Skeleton([-1], np.zeros((1, 3)), np.ones((1, 1)))


def _rz(theta):
    return np.array([0.0, 0.0, theta])


def test_identity_pose_is_exact(quad):
    m, _, sk = quad
    assert np.array_equal(lbs_deform(sk, PoseParams.identity(6), m.vertices), m.vertices)


def test_single_bone_quarter_turn():
    pose = PoseParams(np.zeros(3), np.zeros(3), 1.0, [_rz(math.pi / 2)])
    out = lbs_deform(_one_bone(), pose, np.array([[1.0, 0.0, 0.0]]))
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_root_transform_order():
    pose = PoseParams(_rz(math.pi / 2), [1.0, 2.0, 3.0], 2.0, np.zeros((1, 3)))
    out = lbs_deform(_one_bone(), pose, np.array([[1.0, 0.0, 0.0]]))
    # s * R * v + t
    assert np.allclose(out, [[1.0, 4.0, 3.0]], atol=1e-14)


def test_linear_blend_half_weights():
    # bone 1 rotated by pi about z around head (1,0,0) maps the origin to (2,0,0)
    sk = Skeleton([-1, 0], np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0.5, 0.5]]))
    pose = PoseParams(np.zeros(3), np.zeros(3), 1.0, [np.zeros(3), _rz(math.pi)])
    out = lbs_deform(sk, pose, np.zeros((1, 3)))
    assert np.allclose(out, [[1.0, 0.0, 0.0]], atol=1e-14)


def test_bad_weights_rejected():
    with pytest.raises(ValueError):
        Skeleton([-1, 0], np.zeros((2, 3)), np.array([[0.3, 0.3]]))


def test_child_inherits_parent_rotation():
    sk = Skeleton([-1, 0], np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0.0, 1.0]]))
    pose = PoseParams(np.zeros(3), np.zeros(3), 1.0, [_rz(math.pi / 2), np.zeros(3)])
    out = lbs_deform(sk, pose, np.array([[2.0, 0.0, 0.0]]))
    assert np.allclose(out, [[0.0, 2.0, 0.0]], atol=1e-14)


def test_point_loss_examples(rng):
    p = rng.normal(size=(5, 3))
    assert float(point_loss(p, p).data) == 0.0
    assert float(point_loss(np.array([[1.0, 2.0, 0.0]]), np.zeros((1, 3))).data) == 3.0
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    ref = math.fsum(math.fsum(abs(x - y) for x, y in zip(r, s)) for r, s in zip(a.tolist(), b.tolist())) / 100
    assert float(point_loss(a, b).data) == pytest.approx(ref, rel=1e-13)
    with pytest.raises(ValueError):
        point_loss(a, b[:5])


def test_arap_examples(quad, rng):
    m, _, _ = quad
    e = m.edges()
    v = m.vertices
    rest = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    assert float(arap_loss(e, rest, v).data) == 0.0
    assert float(arap_loss(e, rest, 2 * v).data) == pytest.approx(rest.mean(), rel=1e-12)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert float(arap_loss(e, rest, v @ q.T + [3, -1, 2]).data) <= 1e-6


def test_smooth_examples(rng):
    f = rng.normal(size=(4, 3))
    assert float(smooth_loss([f, f, f]).data) == 0.0
    assert float(smooth_loss([np.zeros((1, 3)), np.array([[1.0, 0, 0]])]).data) == 1.0
    frames = [rng.normal(size=(6, 3)) for _ in range(3)]
    ref = sum(((frames[t] - frames[t + 1]) ** 2).sum() for t in range(2)) / (6 * 2)
    assert float(smooth_loss(frames).data) == pytest.approx(ref, rel=1e-13)
    with pytest.raises(ValueError):
        smooth_loss([f])


def test_zero_iterations_returns_identity(quad):
    m, _, sk = quad
    res = align_pose(sk, m.vertices, m.edges(), np.arange(5), m.vertices[:5], AlignConfig(iterations=0))
    assert np.array_equal(lbs_deform(sk, res.pose, m.vertices), m.vertices)
    assert res.trace == []


def test_rest_target_has_no_drift(quad):
    m, _, sk = quad
    res = align_pose(sk, m.vertices, m.edges(), np.arange(m.n_vertices), m.vertices, AlignConfig(iterations=200))
    assert res.trace[0] <= res.trace[-1] + 1e-9
    assert np.max(np.abs(lbs_deform(sk, res.pose, m.vertices) - m.vertices)) <= 1e-3


def test_phase_contract_and_descent(quad):
    m, _, sk = quad
    target = lbs_deform(sk, random_pose(6, seed=11), m.vertices)
    res = align_pose(sk, m.vertices, m.edges(), np.arange(m.n_vertices), target,
                     AlignConfig(iterations=400), record_bones=True)
    assert all(np.array_equal(h, np.zeros((6, 3))) for h in res.bone_history[:200])
    assert not np.array_equal(res.bone_history[200], np.zeros((6, 3)))
    assert res.trace[-1] < 0.1 * res.trace[0]


def test_alignment_errors(quad):
    m, _, sk = quad
    with pytest.raises(ValueError):
        align_pose(sk, m.vertices, m.edges(), [], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        align_pose(sk, m.vertices, m.edges(), [0, 1], np.zeros((3, 3)))


@pytest.fixture(scope="module")
def seq_target(quad):
    m, _, sk = quad
    return lbs_deform(sk, random_pose(6, seed=21), m.vertices)


def test_sequence_identical_frames(quad, seq_target):
    m, _, sk = quad
    idx = np.arange(m.n_vertices)
    res = align_sequence(sk, m.vertices, m.edges(), idx, [seq_target, seq_target],
                         replace(AlignConfig(), iterations=300, w_smooth=1.0))
    a, b = res[0].pose, res[1].pose
    dev = max(np.max(np.abs(a.bone_rots - b.bone_rots)), np.max(np.abs(a.root_rot - b.root_rot)),
              np.max(np.abs(a.root_trans - b.root_trans)), abs(a.scale - b.scale))
    assert dev <= 1e-3


def test_sequence_static_targets_smooth(quad):
    m, _, sk = quad
    idx = np.arange(m.n_vertices)
    cfg = replace(AlignConfig(), iterations=300, w_smooth=1.0)
    res = align_sequence(sk, m.vertices, m.edges(), idx, [m.vertices, m.vertices], cfg)
    xs = [lbs_deform(sk, r.pose, m.vertices) for r in res]
    assert float(smooth_loss(xs).data) <= 1e-6


def test_sequence_without_smoothing_decouples(quad, seq_target):
    m, _, sk = quad
    idx = np.arange(m.n_vertices)
    cfg = replace(AlignConfig(), iterations=300, w_smooth=0.0)
    res = align_sequence(sk, m.vertices, m.edges(), idx, [m.vertices, seq_target], cfg)
    for r, tgt in zip(res, [m.vertices, seq_target]):
        solo = align_pose(sk, m.vertices, m.edges(), idx, tgt, cfg).pose
        assert np.max(np.abs(r.pose.bone_rots - solo.bone_rots)) <= 1e-5
        assert np.max(np.abs(r.pose.root_trans - solo.root_trans)) <= 1e-5
        assert abs(r.pose.scale - solo.scale) <= 1e-5


def test_sequence_frame_mismatch(quad):
    m, _, sk = quad
    with pytest.raises(ValueError):
        align_sequence(sk, m.vertices, m.edges(), [np.arange(3)] * 3, [m.vertices[:3]] * 2)
    with pytest.raises(ValueError):
        align_sequence(sk, m.vertices, m.edges(), np.arange(3), [m.vertices[:3]])


def _separable(rng, n=300, bones=4):
    ids = rng.integers(0, bones, n)
    feats = np.eye(bones)[ids] + rng.normal(0, 0.05, (n, bones))
    return feats, np.eye(bones)[ids]


def test_regressor_rows_sum_to_one(rng):
    feats, w = _separable(rng)
    reg, _ = regress_skinning(feats, w, np.arange(200), np.arange(200, 300), epochs=5)
    reg.weight = rng.normal(0, 50, reg.weight.shape)
    assert np.all(np.abs(reg.predict(feats).sum(axis=1) - 1) <= 1e-6)


def test_regressor_separable_instance(rng):
    feats, w = _separable(rng)
    _, mse = regress_skinning(feats, w, np.arange(200), np.arange(200, 300))
    assert mse < 1e-3


def test_regressor_lr_zero_keeps_parameters(rng):
    feats, w = _separable(rng)
    a, mse_a = regress_skinning(feats, w, np.arange(200), np.arange(200, 300), epochs=0)
    b, mse_b = regress_skinning(feats, w, np.arange(200), np.arange(200, 300), epochs=50, lr=0.0)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias) and mse_a == mse_b


def test_regressor_errors(rng):
    feats, w = _separable(rng)
    with pytest.raises(ValueError):
        regress_skinning(feats, np.ones((300, 1)), np.arange(200), np.arange(200, 300))
    with pytest.raises(ValueError):
        regress_skinning(feats, w, np.arange(200), np.arange(150, 300))


def test_kfold_partition():
    folds = list(kfold_indices(23, 5, seed=1))
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(23))
    for tr, te in folds:
        assert np.intersect1d(tr, te).size == 0 and len(tr) + len(te) == 23


def test_sparse_indices(quad):
    m, _, _ = quad
    idx = sparse_indices(m.vertices, 0.05)
    assert len(idx) == round(0.05 * m.n_vertices) and len(set(idx.tolist())) == len(idx)


def test_skeleton_and_pose_files(quad, tmp_path):
    _, _, sk = quad
    write_skeleton(tmp_path / "s.txt", sk)
    back = read_skeleton(tmp_path / "s.txt")
    assert np.array_equal(back.parents, sk.parents) and np.array_equal(back.heads, sk.heads)
    assert np.allclose(back.weights, sk.weights, atol=1e-7) and back.names == sk.names
    pose = random_pose(6, seed=2)
    write_pose_csv(tmp_path / "p.csv", pose)
    assert (tmp_path / "p.csv").read_text().splitlines()[0].split(",") == POSE_HEADER
    got = read_pose_csv(tmp_path / "p.csv")
    assert np.array_equal(got.bone_rots, pose.bone_rots) and got.scale == pose.scale
    assert np.array_equal(got.root_trans, pose.root_trans)
