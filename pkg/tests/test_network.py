import struct

import numpy as np
import pytest

from geodistill.autodiff import Tensor, rodrigues
from geodistill.features import normalize_rows
from geodistill.gradcheck import STEP, TOLERANCE, relative_error
from geodistill.network import (Autoencoder, CheckpointError, EmaState, OptimizerState, adamw_step,
                                decoder_forward, ema_maybe_snapshot, ema_update, encoder_widths,
                                encoder_forward, load_checkpoint, save_checkpoint)


def _unit(rng, n, d):
    return normalize_rows(rng.normal(size=(n, d))).astype(np.float32)


def test_full_scale_widths():
    assert encoder_widths(2048, 256) == [2048, 1024, 512, 256]


def test_decoder_widths_mirror_encoder():
    m = Autoencoder(64, 8)
    enc = [m.params[f"enc{k}.proj.W"].shape for k in range(3)]
    dec = [m.params[f"dec{k}.proj.W"].shape for k in range(3)]
    assert [s[::-1] for s in enc[::-1]] == dec


@pytest.mark.parametrize("f,s", [(2048, 256), (32, 8), (16, 4)])
def test_encoder_decoder_shapes_and_unit_rows(f, s, rng):
    m = Autoencoder(f, s, seed=1)
    x = _unit(rng, 5, f)
    z = encoder_forward(m, x)
    y = decoder_forward(m, z)
    assert z.shape == (5, s) and y.shape == (5, f)
    assert np.all(np.abs(np.linalg.norm(z.astype(np.float64), axis=1) - 1) <= 1e-6)
    assert np.all(np.abs(np.linalg.norm(y.astype(np.float64), axis=1) - 1) <= 1e-6)


def test_pointwise_map(rng):
    m = Autoencoder(16, 4)
    x = _unit(rng, 1, 16)
    z = encoder_forward(m, np.repeat(x, 3, axis=0))
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])
    other = encoder_forward(m, np.vstack([x, _unit(rng, 4, 16)]))
    assert np.array_equal(other[0], z[0])


def test_encoder_dim_mismatch(rng):
    with pytest.raises(ValueError):
        encoder_forward(Autoencoder(16, 4), _unit(rng, 2, 8))


def test_constant_loss_gives_zero_gradients():
    w = Tensor(np.ones(3), requires_grad=True)
    (w * 0.0 + 5.0).sum().backward()
    assert np.array_equal(w.grad, np.zeros(3))


def test_affine_squared_error_gradient():
    w, b, x, y = 1.5, -0.25, 2.0, 0.7
    W = Tensor(np.array(w), requires_grad=True)
    B = Tensor(np.array(b), requires_grad=True)
    ((W * x + B - y) ** 2).backward()
    assert W.grad == pytest.approx(2 * (w * x + b - y) * x)
    assert B.grad == pytest.approx(2 * (w * x + b - y))


def test_rodrigues_matches_closed_form(rng):
    w = rng.normal(size=3)
    th = np.linalg.norm(w)
    k = w / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    ref = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
    assert np.allclose(rodrigues(Tensor(w)).data, ref, atol=1e-14)
    assert np.allclose(rodrigues(Tensor(np.zeros(3))).data, np.eye(3))


def test_rodrigues_gradient_near_zero_angle():
    for w0 in (np.zeros(3), np.array([1e-9, -2e-9, 3e-9]), np.array([0.3, -0.2, 1.1])):
        probe = np.arange(9.0).reshape(3, 3)
        w = Tensor(w0.copy(), requires_grad=True)
        (rodrigues(w) * Tensor(probe)).sum().backward()
        for j in range(3):
            up, dn = w0.copy(), w0.copy()
            up[j] += STEP
            dn[j] -= STEP
            num = ((rodrigues(Tensor(up)).data - rodrigues(Tensor(dn)).data) * probe).sum() / (2 * STEP)
            assert relative_error(w.grad[j], num) <= TOLERANCE


def test_adamw_zero_grad_no_decay():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert p["w"].tolist() == [1.0, -2.0]


def test_adamw_decoupled_decay():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert p["w"] == pytest.approx(np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rel=1e-15)


def test_adamw_first_step():
    p = {"w": np.array([1.0])}
    st = OptimizerState(lr=0.1, weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, st)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-7)
    assert st.step == 1


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())


def test_ema_decay_one_and_zero():
    live = {"w": np.array([5.0])}
    e1 = EmaState.from_params({"w": np.array([1.0])}, decay=1.0)
    assert ema_update(e1, live).shadow["w"][0] == 1.0
    e0 = EmaState.from_params({"w": np.array([1.0])}, decay=0.0)
    assert ema_update(e0, live).shadow["w"][0] == 5.0


def test_ema_blend():
    e = EmaState.from_params({"w": np.array([1.0])}, decay=0.9)
    ema_update(e, {"w": np.array([2.0])})
    assert e.shadow["w"][0] == pytest.approx(1.1)


def test_ema_snapshots_strict_improvement():
    e = EmaState.from_params({"w": np.array([0.0])})
    taken = [ema_maybe_snapshot(e, loss, tag=i) for i, loss in enumerate([0.5, 0.7, 0.4, 0.4], start=1)]
    assert taken == [True, False, True, False]
    assert [t for t, _ in e.snapshots] == [1, 3]


def test_checkpoint_round_trip(tmp_path, rng):
    m = Autoencoder(16, 4, seed=3)
    opt = OptimizerState()
    grads = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in m.params.items()}
    adamw_step(m.params, grads, opt)
    ema = EmaState.from_params(m.params)
    ema_maybe_snapshot(ema, 0.3, tag=0)
    save_checkpoint(m, opt, ema, tmp_path / "c.safc")
    m2, opt2, ema2, _ = load_checkpoint(tmp_path / "c.safc")
    for k in m.params:
        assert m.params[k].tobytes() == m2.params[k].tobytes()
        assert opt.m[k].tobytes() == opt2.m[k].tobytes()
    x = _unit(rng, 4, 16)
    assert np.array_equal(encoder_forward(m, x), encoder_forward(m2, x))
    assert opt2.step == 1 and ema2.best_loss == 0.3


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(Autoencoder(16, 4), None, None, tmp_path / "c.safc")
    raw = (tmp_path / "c.safc").read_bytes()
    (tmp_path / "t.safc").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.safc")


def test_checkpoint_version_bump(tmp_path):
    save_checkpoint(Autoencoder(16, 4), None, None, tmp_path / "c.safc")
    raw = bytearray((tmp_path / "c.safc").read_bytes())
    raw[4:6] = struct.pack("<H", 2)
    (tmp_path / "v.safc").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.safc")


def test_same_seed_same_steps_bitwise(rng):
    x = _unit(rng, 6, 16)

    def run():
        m = Autoencoder(16, 4, seed=9)
        opt = OptimizerState(lr=1e-2)
        for _ in range(5):
            P = m.tensors()
            z = m.encode(Tensor(x), P)
            (m.decode(z, P) * Tensor(x)).sum().backward()
            adamw_step(m.params, {k: t.grad for k, t in P.items()}, opt)
        return m.params

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
