"""SAF1 feature matrices, sidecar metadata and image feature maps.

SAF1 layout (all little-endian)::

    b"SAF1" | u32 rows | u32 dim | rows*dim float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SAF1"
_HEADER = struct.Struct("<4sII")


class FeatureFormatError(ValueError):
    pass


def encode_saf1(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {m.shape}")
    if m.shape[0] >= 2**32 or m.shape[1] >= 2**32:
        raise ValueError("matrix dimensions exceed u32")
    payload = np.ascontiguousarray(m, dtype="<f4")
    return _HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + payload.tobytes()


def decode_saf1(buf: bytes, offset: int = 0, check_finite: bool = True):
    """Parse one SAF1 block at ``offset``; returns ``(matrix, next_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise FeatureFormatError("truncated SAF1 header")
    magic, rows, dim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if rows < 1 or dim < 1:
        raise FeatureFormatError(f"invalid shape {rows}x{dim}")
    count = rows * dim
    if count * 4 > 2**62:
        raise FeatureFormatError("rows*dim overflow")
    start = offset + _HEADER.size
    if len(buf) - start < count * 4:
        have = (len(buf) - start) // 4
        raise FeatureFormatError(f"truncated payload: header claims {rows}x{dim}={count} floats, found {have}")
    m = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(rows, dim).astype(np.float32)
    if check_finite and not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(m))[0]
        raise FeatureFormatError(f"non-finite entry at row {bad[0]}, column {bad[1]}")
    return m, start + count * 4


def write_features(matrix, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_saf1(matrix))
    if meta:
        write_sidecar(path, meta)


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m, end = decode_saf1(buf)
    if end != len(buf):
        raise FeatureFormatError(f"{len(buf) - end} trailing bytes after payload")
    return m


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_sidecar(path, meta: dict) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    return parse_key_values(p.read_text())


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def normalize_rows(matrix, eps: float = 1e-12) -> np.ndarray:
    """Scale every row to unit Euclidean norm; zero rows are an error."""
    m = np.asarray(matrix)
    dtype = m.dtype if m.dtype in (np.float32, np.float64) else np.float64
    m64 = m.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m64, m64))
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise ValueError(f"cannot normalize zero row {bad[0]}")
    return (m64 / norms[:, None]).astype(dtype)


@dataclass
class ImageFeatureMap:
    """Per-pixel features with a foreground mask and RGB colors in [0, 1]."""

    features: np.ndarray  # (H, W, d)
    mask: np.ndarray  # (H, W) bool
    colors: np.ndarray  # (H, W, 3)

    @property
    def height(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    def foreground(self):
        """Flattened (features, colors, pixel indices) of masked pixels."""
        idx = np.flatnonzero(self.mask.reshape(-1))
        f = self.features.reshape(-1, self.features.shape[2])[idx]
        c = self.colors.reshape(-1, 3)[idx]
        return f, c, idx


def make_image_feature_map(features, mask, colors) -> ImageFeatureMap:
    features = np.asarray(features)
    mask = np.asarray(mask, dtype=bool)
    colors = np.asarray(colors, dtype=np.float64)
    h, w = mask.shape
    if features.shape[:2] != (h, w) or colors.shape[:2] != (h, w):
        raise ValueError(
            f"dimension mismatch: features {features.shape[:2]}, mask {mask.shape}, colors {colors.shape[:2]}"
        )
    if not mask.any():
        raise ValueError("no foreground pixels")
    feats = features.astype(np.float32).copy()
    flat = feats.reshape(-1, feats.shape[2])
    idx = np.flatnonzero(mask.reshape(-1))
    flat[idx] = normalize_rows(flat[idx])
    return ImageFeatureMap(feats, mask, colors)


def read_image_feature_map(feature_path, mask_path, color_image_path) -> ImageFeatureMap:
    from PIL import Image

    meta = read_sidecar(feature_path)
    if "height" not in meta or "width" not in meta:
        raise ValueError(f"{sidecar_path(feature_path)}: sidecar must give height and width")
    h, w = int(meta["height"]), int(meta["width"])
    flat = read_features(feature_path)
    if flat.shape[0] != h * w:
        raise ValueError(f"dimension mismatch: {flat.shape[0]} feature rows for a {h}x{w} image")
    mask = np.asarray(Image.open(mask_path).convert("L")) > 0
    rgb = np.asarray(Image.open(color_image_path).convert("RGB"), dtype=np.float64) / 255.0
    return make_image_feature_map(flat.reshape(h, w, -1), mask, rgb)
