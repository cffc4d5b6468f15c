"""BRAE checkpoint files.

Layout (all little-endian)::

    4s   magic "BRAE"
    u16  format version
    u16  L, u16 C, u16 input_channels
    u8   n, then n ASCII bytes: binarizer name
    f64  tau_initial, anneal_factor, tau_floor, tau
    u32  number of arrays
    per array, in ResidualAutoencoder.state_arrays() order:
         u8 n + name, u8 ndim, u32 dims..., float32 data (row-major)
    u8   has_optimizer
    if 1: u64 step, f64 lr, beta1, beta2, eps,
          then m and v (float32) for every trainable array in order

The fingerprint is the SHA-256 of everything before ``has_optimizer``,
so resuming training state does not change what a client decodes with.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
import numpy as np

from . import nn
from .autoencoder import AutoencoderConfig, ResidualAutoencoder
from .binarizer import GumbelConfig
from .errors import ConfigError, IntegrityError

__all__ = ["MAGIC", "to_bytes", "from_bytes", "save", "load", "fingerprint"]

MAGIC = b"BRAE"
VERSION = 1
_HEAD = struct.Struct("<4sHHHH")
_GUMBEL = struct.Struct("<dddd")
_OPT = struct.Struct("<Qdddd")
_F32 = np.dtype("<f4")


def _params_bytes(model: ResidualAutoencoder) -> bytes:
    cfg = model.config
    g = model.binarizer.gumbel
    name = cfg.binarizer.value.encode("ascii")
    parts = [_HEAD.pack(MAGIC, VERSION, cfg.L, cfg.C, cfg.input_channels),
             struct.pack("<B", len(name)), name,
             _GUMBEL.pack(g.tau_initial, g.anneal_factor, g.tau_floor, g.tau)]
    arrays = model.state_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for key, arr in arrays.items():
        kb = key.encode("ascii")
        parts.append(struct.pack("<B", len(kb)) + kb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def fingerprint(model: ResidualAutoencoder) -> bytes:
    """16-byte digest of the architecture, binarizer and parameter values."""
    return hashlib.sha256(_params_bytes(model)).digest()[:16]


def to_bytes(model: ResidualAutoencoder, include_optimizer: bool = True) -> bytes:
    out = [_params_bytes(model)]
    opt = model.optimizer if include_optimizer else None
    if opt is None:
        out.append(b"\x00")
    else:
        st0 = next(iter(opt.states.values()))
        out.append(b"\x01" + _OPT.pack(st0.step, st0.lr, st0.beta1, st0.beta2, st0.eps))
        for key in model.parameters():
            st = opt.states[key]
            out.append(np.ascontiguousarray(st.m, dtype=_F32).tobytes())
            out.append(np.ascontiguousarray(st.v, dtype=_F32).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def unpack(self, fmt):
        s = struct.Struct(fmt) if isinstance(fmt, str) else fmt
        if self.off + s.size > len(self.data):
            raise IntegrityError("checkpoint truncated")
        vals = s.unpack_from(self.data, self.off)
        self.off += s.size
        return vals

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise IntegrityError("checkpoint truncated")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) * _F32.itemsize
        return np.frombuffer(self.take(n), dtype=_F32).reshape(shape).copy()


def from_bytes(data: bytes) -> ResidualAutoencoder:
    r = _Reader(data)
    magic, version, L, C, cin = r.unpack(_HEAD)
    if magic != MAGIC:
        raise IntegrityError(f"not a BRAE checkpoint (magic {magic!r})")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<B")
    kind = r.take(n).decode("ascii")
    tau0, factor, floor, tau = r.unpack(_GUMBEL)
    cfg = AutoencoderConfig(L=L, C=C, input_channels=cin, binarizer=kind,
                            gumbel=GumbelConfig(tau0, factor, floor, tau))
    model = ResidualAutoencoder(cfg)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (kl,) = r.unpack("<B")
        key = r.take(kl).decode("ascii")
        (nd,) = r.unpack("<B")
        shape = r.unpack(f"<{nd}I")
        arrays[key] = r.array(shape)
    try:
        model.load_state_arrays(arrays)
    except ValueError as exc:
        raise IntegrityError(f"checkpoint does not match its own config: {exc}") from None
    (has_opt,) = r.unpack("<B")
    if has_opt:
        step, lr, b1, b2, eps = r.unpack(_OPT)
        params = model.parameters()
        opt = nn.Adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
        for key, p in params.items():
            st = opt.states[key]
            st.m, st.v, st.step = r.array(p.shape), r.array(p.shape), step
        model.optimizer = opt
    if r.off != len(data):
        raise IntegrityError(f"{len(data) - r.off} trailing bytes after checkpoint")
    return model


def save(model: ResidualAutoencoder, path) -> Path:
    from .data import atomic_write_bytes

    path = Path(path)
    atomic_write_bytes(path, to_bytes(model))
    return path


def load(path) -> ResidualAutoencoder:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
