import struct

import numpy as np
import pytest
from PIL import Image

from geodistill.features import (FeatureFormatError, encode_saf1, normalize_rows, read_features,
                                 read_image_feature_map, write_features)


def test_round_trip_3x5(tmp_path, rng):
    m = rng.normal(size=(3, 5)).astype(np.float32)
    write_features(m, tmp_path / "m.saf")
    back = read_features(tmp_path / "m.saf")
    assert back.tobytes() == m.tobytes()


def test_round_trip_negative_zero_and_subnormal(tmp_path):
    tiny = np.finfo(np.float32).smallest_subnormal
    m = np.array([[-0.0, tiny, -tiny, 3.4e38]], dtype=np.float32)
    write_features(m, tmp_path / "m.saf")
    assert read_features(tmp_path / "m.saf").tobytes() == m.tobytes()


def test_layout_is_little_endian_header_then_rows(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_features(m, tmp_path / "m.saf")
    raw = (tmp_path / "m.saf").read_bytes()
    assert raw[:4] == b"SAF1"
    assert struct.unpack("<II", raw[4:12]) == (2, 3)
    assert np.frombuffer(raw[12:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_bad_magic(tmp_path):
    raw = bytearray(encode_saf1(np.ones((2, 2))))
    raw[:4] = b"XXXX"
    (tmp_path / "b.saf").write_bytes(bytes(raw))
    with pytest.raises(FeatureFormatError, match="magic"):
        read_features(tmp_path / "b.saf")


def test_truncated_payload(tmp_path):
    raw = struct.pack("<4sII", b"SAF1", 10, 10) + np.zeros(50, "<f4").tobytes()
    (tmp_path / "t.saf").write_bytes(raw)
    with pytest.raises(FeatureFormatError, match="truncated"):
        read_features(tmp_path / "t.saf")


def test_overflowing_header_is_reported_as_truncation(tmp_path):
    raw = struct.pack("<4sII", b"SAF1", 2**32 - 1, 2**32 - 1)
    (tmp_path / "o.saf").write_bytes(raw)
    with pytest.raises(FeatureFormatError):
        read_features(tmp_path / "o.saf")


def test_non_finite_rejected(tmp_path):
    write_features(np.array([[1.0, np.nan]]), tmp_path / "n.saf")
    with pytest.raises(FeatureFormatError, match="non-finite"):
        read_features(tmp_path / "n.saf")


def test_normalize_rows_analytic():
    assert normalize_rows(np.array([[3.0, 4.0]])).tolist() == [[0.6, 0.8]]


def test_normalize_unit_row_unchanged(rng):
    u = normalize_rows(rng.normal(size=(10, 7)))
    assert np.allclose(normalize_rows(u), u, atol=1e-7, rtol=0)


def test_normalize_idempotent_and_unit(rng):
    x = rng.normal(size=(100, 16)).astype(np.float32)
    once = normalize_rows(x)
    assert np.all(np.abs(np.linalg.norm(once.astype(np.float64), axis=1) - 1) <= 1e-6)
    assert np.allclose(normalize_rows(once), once, atol=1e-7)


def test_normalize_zero_row_names_row():
    with pytest.raises(ValueError, match="row 1"):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def _image_inputs(tmp_path, mask, h=2, w=2, dim=4, rng=None):
    rng = rng or np.random.default_rng(0)
    write_features(rng.normal(size=(h * w, dim)), tmp_path / "f.saf", meta={"height": h, "width": w})
    Image.fromarray(mask.astype(np.uint8) * 255).save(tmp_path / "mask.png")
    Image.fromarray(rng.integers(0, 255, (h, w, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    return tmp_path / "f.saf", tmp_path / "mask.png", tmp_path / "rgb.png"


def test_image_map_all_foreground(tmp_path):
    fm = read_image_feature_map(*_image_inputs(tmp_path, np.ones((2, 2), bool)))
    feats, colors, idx = fm.foreground()
    assert len(feats) == 4
    assert np.allclose(np.linalg.norm(feats.astype(np.float64), axis=1), 1, atol=1e-6)


def test_image_map_half_foreground(tmp_path):
    mask = np.zeros((4, 4), bool)
    mask[:, :2] = True
    fm = read_image_feature_map(*_image_inputs(tmp_path, mask, 4, 4))
    assert len(fm.foreground()[0]) == 8


def test_image_map_all_background(tmp_path):
    with pytest.raises(ValueError, match="no foreground pixels"):
        read_image_feature_map(*_image_inputs(tmp_path, np.zeros((2, 2), bool)))


def test_image_map_dimension_mismatch(tmp_path):
    f, m, c = _image_inputs(tmp_path, np.ones((2, 2), bool))
    Image.fromarray(np.zeros((3, 2, 3), np.uint8)).save(c)
    with pytest.raises(ValueError, match="mismatch"):
        read_image_feature_map(f, m, c)
