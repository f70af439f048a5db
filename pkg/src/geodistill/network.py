"""Point-wise feature autoencoder, AdamW, parameter EMA and checkpoints.

Each encoder block is::

    h   = x + layer_norm(silu(x @ W1 + b1))    # width preserving, skip
    out = h @ W2 + b2                          # halves the width

The decoder mirrors the encoder, expanding instead of halving. Both ends
project their output rows onto the unit sphere.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .features import FeatureFormatError, decode_saf1, encode_saf1

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"SAFC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encoder_widths(input_dim: int, embed_dim: int, blocks: int = 3) -> list[int]:
    """Widths f -> f/2 -> f/4 -> s; intermediate widths never drop below s."""
    widths = [input_dim]
    for k in range(1, blocks):
        widths.append(max(embed_dim, input_dim >> k))
    widths.append(embed_dim)
    return widths


def _layer_names(prefix, k):
    return [f"{prefix}{k}.skip.W", f"{prefix}{k}.skip.b", f"{prefix}{k}.ln.g",
            f"{prefix}{k}.ln.b", f"{prefix}{k}.proj.W", f"{prefix}{k}.proj.b"]


class Autoencoder:
    """Parameters plus forward passes of the encoder and decoder.

    ``normalize_embedding=False`` drops the unit-sphere projection of the
    embedding (used by the Euclidean ablation losses).
    """

    def __init__(self, input_dim: int, embed_dim: int, seed: int = 0,
                 normalize_embedding: bool = True, dtype=np.float32, params=None):
        if input_dim < 1 or embed_dim < 1:
            raise ValueError("dimensions must be positive")
        self.input_dim = int(input_dim)
        self.embed_dim = int(embed_dim)
        self.normalize_embedding = bool(normalize_embedding)
        self.widths = encoder_widths(self.input_dim, self.embed_dim)
        if params is None:
            params = self._init(np.random.default_rng(seed), dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict(params)

    def _init(self, rng, dtype):
        p = OrderedDict()

        def linear(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            p[name + ".W"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            p[name + ".b"] = rng.uniform(-bound, bound, (fan_out,)).astype(dtype)

        for k, (w_in, w_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            linear(f"enc{k}.skip", w_in, w_in)
            p[f"enc{k}.ln.g"] = np.ones(w_in, dtype)
            p[f"enc{k}.ln.b"] = np.zeros(w_in, dtype)
            linear(f"enc{k}.proj", w_in, w_out)
        rev = self.widths[::-1]
        for k, (w_in, w_out) in enumerate(zip(rev[:-1], rev[1:])):
            linear(f"dec{k}.skip", w_in, w_in)
            p[f"dec{k}.ln.g"] = np.ones(w_in, dtype)
            p[f"dec{k}.ln.b"] = np.zeros(w_in, dtype)
            linear(f"dec{k}.proj", w_in, w_out)
        return p

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Autoencoder":
        return Autoencoder(self.input_dim, self.embed_dim, normalize_embedding=self.normalize_embedding,
                           params={k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.input_dim, self.embed_dim, normalize_embedding=self.normalize_embedding,
                           params={k: v.copy() for k, v in self.params.items()})

    def tensors(self, requires_grad=True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    # -- forward passes on Tensors
    @staticmethod
    def _block(x, P, prefix):
        W1, b1, g, b, W2, b2 = (P[n] for n in _layer_names(prefix, ""))
        h = (x @ W1 + b1).silu()
        mu = h.mean(axis=-1, keepdims=True)
        hc = h - mu
        var = (hc * hc).mean(axis=-1, keepdims=True)
        h = hc / (var + LN_EPS).sqrt() * g + b
        return (x + h) @ W2 + b2

    def encode(self, x, P=None):
        P = P if P is not None else self.tensors(requires_grad=False)
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        for k in range(len(self.widths) - 1):
            x = self._block(x, P, f"enc{k}")
        _check_finite(x, "encoder")
        return x.normalize_rows() if self.normalize_embedding else x

    def decode(self, z, P=None):
        P = P if P is not None else self.tensors(requires_grad=False)
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        if z.shape[-1] != self.embed_dim:
            raise ValueError(f"expected embedding dim {self.embed_dim}, got {z.shape[-1]}")
        for k in range(len(self.widths) - 1):
            z = self._block(z, P, f"dec{k}")
        _check_finite(z, "decoder")
        return z.normalize_rows()


def _check_finite(t, where):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activation in {where}")


def encoder_forward(model: Autoencoder, features) -> np.ndarray:
    return model.encode(features).data


def decoder_forward(model: Autoencoder, embedded) -> np.ndarray:
    return model.decode(embedded).data


# ---------------------------------------------------------------- AdamW

@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if g is not None and g.shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k}: param {params[k].shape}, grad {g.shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        dt = p.dtype
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        p *= dt.type(1.0 - state.lr * state.weight_decay)
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt.type(c2)) + dt.type(state.eps)
        p -= dt.type(state.lr / c1) * m / denom


# ---------------------------------------------------------------- EMA

@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.999
    best: Optional[dict] = None
    best_loss: float = float("inf")
    snapshots: list = field(default_factory=list)

    @classmethod
    def from_params(cls, params: dict, decay: float = 0.999) -> "EmaState":
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        return cls(shadow={k: v.copy() for k, v in params.items()}, decay=decay)


def ema_update(ema: EmaState, params: dict) -> EmaState:
    d = ema.decay
    for k, p in params.items():
        s = ema.shadow[k]
        if d == 1.0:
            continue
        if d == 0.0:
            s[...] = p
        else:
            s *= s.dtype.type(d)
            s += s.dtype.type(1.0 - d) * p
    return ema


def ema_maybe_snapshot(ema: EmaState, validation_loss: float, tag=None) -> bool:
    """Keep a copy of the shadow when ``validation_loss`` strictly improves."""
    if validation_loss < ema.best_loss:
        ema.best = {k: v.copy() for k, v in ema.shadow.items()}
        ema.best_loss = float(validation_loss)
        ema.snapshots.append((tag, float(validation_loss)))
        return True
    return False


# ---------------------------------------------------------------- checkpoints

def _pack_section(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    a = np.asarray(arr)
    return struct.pack("<H", len(nb)) + nb + encode_saf1(a.reshape(1, -1) if a.ndim != 2 else a)


def checkpoint_bytes(model: Autoencoder, optimizer: Optional[OptimizerState] = None,
                     ema: Optional[EmaState] = None, extra: Optional[dict] = None) -> bytes:
    sections = [("param/" + k, v) for k, v in model.params.items()]
    meta = {
        "input_dim": model.input_dim, "embed_dim": model.embed_dim,
        "normalize_embedding": model.normalize_embedding,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "extra": extra or {},
    }
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps,
                             "weight_decay": optimizer.weight_decay, "step": optimizer.step}
        sections += [("adam_m/" + k, v) for k, v in optimizer.m.items()]
        sections += [("adam_v/" + k, v) for k, v in optimizer.v.items()]
    if ema is not None:
        meta["ema"] = {"decay": ema.decay, "best_loss": ema.best_loss if ema.best is not None else None,
                       "snapshots": ema.snapshots}
        sections += [("ema/" + k, v) for k, v in ema.shadow.items()]
        if ema.best is not None:
            sections += [("best/" + k, v) for k, v in ema.best.items()]
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(mb)), mb,
           struct.pack("<I", len(sections))]
    out += [_pack_section(n, a) for n, a in sections]
    return b"".join(out)


def save_checkpoint(model, optimizer, ema, path, extra=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, optimizer, ema, extra))


def load_checkpoint(path):
    """Returns ``(model, optimizer, ema, extra)``; missing states are ``None``."""
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf)
    except (struct.error, FeatureFormatError, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes):
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (mlen,) = struct.unpack_from("<I", buf, 6)
    if 10 + mlen > len(buf):
        raise CheckpointError("truncated checkpoint metadata")
    meta = json.loads(buf[10:10 + mlen].decode("utf-8"))
    pos = 10 + mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shapes = meta["shapes"]
    groups: dict = {"param": OrderedDict(), "adam_m": {}, "adam_v": {}, "ema": {}, "best": {}}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen > len(buf):
            raise CheckpointError("truncated section name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = decode_saf1(buf, pos, check_finite=False)
        group, key = name.split("/", 1)
        groups[group][key] = arr.reshape(shapes[key])
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    model = Autoencoder(meta["input_dim"], meta["embed_dim"],
                        normalize_embedding=meta["normalize_embedding"], params=groups["param"])
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = OptimizerState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                             weight_decay=o["weight_decay"], step=o["step"],
                             m=groups["adam_m"], v=groups["adam_v"])
    ema = None
    if "ema" in meta:
        e = meta["ema"]
        ema = EmaState(shadow=groups["ema"], decay=e["decay"], best=groups["best"] or None,
                       best_loss=e["best_loss"] if e["best_loss"] is not None else float("inf"),
                       snapshots=[tuple(s) for s in e["snapshots"]])
    return model, opt, ema, meta.get("extra", {})


def deployed_model(model: Autoencoder, ema: Optional[EmaState]) -> Autoencoder:
    """The best-validation EMA weights when present, else the live weights."""
    if ema is not None and ema.best is not None:
        src = ema.best
    elif ema is not None:
        src = ema.shadow
    else:
        return model
    return Autoencoder(model.input_dim, model.embed_dim, normalize_embedding=model.normalize_embedding,
                       params={k: src[k].copy() for k in model.params})
