"""Server/client flow: base codec, residual side-channel, container, accounting.

Container layout (little-endian)::

    4s   magic "BRSC"
    u8   version
    u32  frame count
    u16  channels, height, width
    f64  fps
    u8   L, u16 C, u8 k
    u8 n + n ASCII bytes: binarizer name ("" when no model)
    16s  checkpoint fingerprint (zeros when no model)
    u8 n + n ASCII bytes: base codec kind
    u64  base payload length, then the base payload
    per frame: u32 length, then an EncodedPayload (length 0 = no residual)

Every bit of the file is attributed to exactly one of base, residual or
header, so the three add up to the file size.
"""

from __future__ import annotations

import dataclasses
import struct
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint
from .autoencoder import ResidualAutoencoder, crop, pad_to_multiple
from .codec import BaseCodecResult, ExternalCodec, ToyDCTCodec
from .entropy import HEADER_BITS, EncodedPayload, decode_map, encode_map, pack_bits, unpack_bits
from .errors import ConfigError, IntegrityError, ShapeError

__all__ = [
    "MAGIC",
    "compute_residual",
    "StreamContainer",
    "BitrateReport",
    "EncodeResult",
    "server_encode",
    "client_decode",
    "bitrate_account",
    "OVER_BUDGET_TOLERANCE",
    "residual_bits_bound",
    "auto_split",
]

MAGIC = b"BRSC"
VERSION = 1
OVER_BUDGET_TOLERANCE = 0.10
NO_FINGERPRINT = bytes(16)
_HEAD = struct.Struct("<4sBIHHHdBHB")


def compute_residual(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """R = X - Y, exact and unquantized."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"compute_residual: shapes {x.shape} and {y.shape} differ")
    return x - y


@dataclass
class StreamContainer:
    frame_count: int
    dims: tuple
    fps: float
    L: int
    C: int
    k: int
    binarizer: str
    fingerprint: bytes
    codec_kind: str
    base_payload: bytes
    residual_payloads: List[bytes] = field(default_factory=list)

    def __post_init__(self):
        if len(self.residual_payloads) != self.frame_count:
            raise IntegrityError(f"{len(self.residual_payloads)} residual payloads for "
                                 f"{self.frame_count} frames")

    @property
    def has_residual(self) -> bool:
        return any(len(p) for p in self.residual_payloads)

    @property
    def base_bits(self) -> int:
        return 8 * len(self.base_payload)

    @property
    def residual_bits(self) -> int:
        return 8 * sum(len(p) for p in self.residual_payloads)

    def to_bytes(self) -> bytes:
        c, h, w = self.dims
        bname = self.binarizer.encode("ascii")
        kname = self.codec_kind.encode("ascii")
        parts = [_HEAD.pack(MAGIC, VERSION, self.frame_count, c, h, w, self.fps, self.L, self.C, self.k),
                 struct.pack("<B", len(bname)), bname, self.fingerprint,
                 struct.pack("<B", len(kname)), kname,
                 struct.pack("<Q", len(self.base_payload)), self.base_payload]
        for p in self.residual_payloads:
            parts.append(struct.pack("<I", len(p)))
            parts.append(p)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamContainer":
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(data):
                raise IntegrityError("container truncated")
            out = data[off:off + n]
            off += n
            return out

        magic, version, n, c, h, w, fps, L, C, k = _HEAD.unpack(take(_HEAD.size))
        if magic != MAGIC:
            raise IntegrityError(f"not a BRSC container (magic {magic!r})")
        if version != VERSION:
            raise IntegrityError(f"unsupported container version {version}")
        binarizer = take(take(1)[0]).decode("ascii")
        fp = take(16)
        codec_kind = take(take(1)[0]).decode("ascii")
        (blen,) = struct.unpack("<Q", take(8))
        base = take(blen)
        payloads = []
        for _ in range(n):
            (plen,) = struct.unpack("<I", take(4))
            payloads.append(take(plen))
        if off != len(data):
            raise IntegrityError(f"{len(data) - off} trailing bytes after container")
        return cls(n, (c, h, w), fps, L, C, k, binarizer, fp, codec_kind, base, payloads)


@dataclass
class BitrateReport:
    base_bits: int
    residual_bits: int
    header_bits: int
    frame_count: int
    fps: float
    pixels_per_frame: int
    budget_bps: Optional[float] = None

    @property
    def total_bits(self) -> int:
        return self.base_bits + self.residual_bits + self.header_bits

    @property
    def duration_seconds(self) -> float:
        return self.frame_count / self.fps

    @property
    def total_mbps(self) -> float:
        return self.total_bits / self.duration_seconds / 1e6

    @property
    def bits_per_pixel(self) -> float:
        return self.total_bits / (self.frame_count * self.pixels_per_frame)

    @property
    def over_budget(self) -> bool:
        if self.budget_bps is None:
            return False
        return self.total_mbps * 1e6 > self.budget_bps * (1 + OVER_BUDGET_TOLERANCE)

    def as_dict(self) -> dict:
        return {"base_bits": self.base_bits, "residual_bits": self.residual_bits,
                "header_bits": self.header_bits, "total_bits": self.total_bits,
                "frame_count": self.frame_count, "fps": self.fps,
                "duration_seconds": self.duration_seconds, "total_mbps": self.total_mbps,
                "bits_per_pixel": self.bits_per_pixel, "budget_bps": self.budget_bps,
                "over_budget": self.over_budget}


def bitrate_account(container: StreamContainer, fps: Optional[float] = None,
                    budget_bps: Optional[float] = None) -> BitrateReport:
    """Split the serialized container into base, residual and header bits."""
    fps = container.fps if fps is None else fps
    if fps <= 0:
        raise ConfigError("fps must be positive")
    total = 8 * len(container.to_bytes())
    base, resid = container.base_bits, container.residual_bits
    _, h, w = container.dims
    return BitrateReport(base, resid, total - base - resid, container.frame_count, fps, h * w, budget_bps)


@dataclass
class EncodeResult:
    container: StreamContainer
    report: BitrateReport
    base: BaseCodecResult


def residual_bits_bound(model, dims, k: int = 16) -> int:
    """Most container bits one frame's residual can take (raw fallback plus framing).

    ``model`` may be a ResidualAutoencoder or just its AutoencoderConfig.
    """
    cfg = getattr(model, "config", model)
    _, h, w = dims
    f = cfg.factor
    bits = cfg.C * ((h + (-h) % f) // f) * ((w + (-w) % f) // f)
    return HEADER_BITS + -(-bits // k) * k + 32


def auto_split(budget_bps: float, fps: float, model, dims, k: int = 16) -> float:
    """Base share that leaves room for the worst-case residual rate."""
    split = 1.0 - residual_bits_bound(model, dims, k) * fps / budget_bps
    if split <= 0:
        raise ConfigError(f"budget {budget_bps:g} bits/s cannot carry the residual side-channel alone")
    return split


def _latent_maps(model: ResidualAutoencoder, residuals: np.ndarray, chunk: int = 64) -> np.ndarray:
    r = pad_to_multiple(residuals, model.config.factor)
    return np.concatenate([model.latent_map(r[i:i + chunk]) for i in range(0, len(r), chunk)])


def server_encode(video, budget_bps: float, split: float, codec, model: Optional[ResidualAutoencoder],
                  fps: Optional[float] = None, k: int = 16) -> EncodeResult:
    """Run the base codec at ``split * budget_bps`` and attach residual payloads.

    A toy codec with a fixed quality ignores the rate target.  The residual
    side-channel is not rate-controlled; a total above the budget by more
    than 10% is flagged on the report and warned about.
    """
    x = np.asarray(video, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"video must be (N, C, H, W), got {x.shape}")
    if not 0 < split <= 1:
        raise ConfigError(f"split must be in (0, 1], got {split}")
    if budget_bps <= 0:
        raise ConfigError("budget must be positive")
    fps = float(fps if fps is not None else codec.fps)
    if codec.fps != fps:
        codec = dataclasses.replace(codec, fps=fps)
    base = codec.encode(x, target_bitrate=split * budget_bps)
    y = base.decoded
    n, c, h, w = x.shape
    if split == 1.0 or model is None:
        if split != 1.0:
            raise ConfigError("a model is required when split < 1")
        L = C = 0
        kind, fp, payloads = "", NO_FINGERPRINT, [b""] * n
    else:
        if model.config.input_channels != c:
            raise ShapeError(f"model expects {model.config.input_channels} channels, video has {c}")
        maps = _latent_maps(model, compute_residual(x, y))
        payloads = [encode_map(pack_bits(m), k).to_bytes() for m in maps]
        L, C = model.config.L, model.config.C
        kind, fp = model.config.binarizer.value, checkpoint.fingerprint(model)
    container = StreamContainer(n, (c, h, w), fps, L, C, k, kind, fp, codec.kind, base.payload, payloads)
    report = bitrate_account(container, fps, budget_bps)
    if report.over_budget:
        warnings.warn(f"realized rate {report.total_mbps:.6f} Mbps exceeds the "
                      f"{budget_bps / 1e6:.6f} Mbps budget by more than 10%", RuntimeWarning, stacklevel=2)
    return EncodeResult(container, report, base)


def _decode_base(container: StreamContainer, codec) -> np.ndarray:
    n = container.frame_count
    _, h, w = container.dims
    if container.codec_kind == ToyDCTCodec.kind:
        y = ToyDCTCodec.decode(container.base_payload)
    elif isinstance(codec, ExternalCodec):
        y = codec.decode(container.base_payload, n, h, w)
    else:
        raise ConfigError(f"container base codec {container.codec_kind!r} needs an external codec to decode")
    if y.shape != (n,) + tuple(container.dims):
        raise IntegrityError(f"base payload decodes to {y.shape}, header says {(n,) + tuple(container.dims)}")
    return y


def client_decode(container: StreamContainer, model: Optional[ResidualAutoencoder],
                  codec=None) -> np.ndarray:
    """Rebuild the frames: Y from the base payload plus the decoded residual, clamped."""
    y = _decode_base(container, codec)
    if not container.has_residual:
        return y
    if model is None:
        raise ConfigError("container carries residuals; a checkpoint is required to decode it")
    fp = checkpoint.fingerprint(model)
    if fp != container.fingerprint:
        raise IntegrityError(f"checkpoint fingerprint {fp.hex()} does not match container "
                             f"{container.fingerprint.hex()}")
    _, h, w = container.dims
    f = model.config.factor
    ldims = (model.config.C, (h + (-h) % f) // f, (w + (-w) % f) // f)
    maps = []
    for i, raw in enumerate(container.residual_payloads):
        if not raw:
            raise IntegrityError(f"frame {i}: residual payload missing")
        bm = decode_map(EncodedPayload.from_bytes(raw), ldims)
        maps.append(unpack_bits(bm, model.dtype))
    maps = np.stack(maps)
    r_hat = np.concatenate([model.decode(maps[i:i + 64]) for i in range(0, len(maps), 64)])
    r_hat = crop(r_hat, (h, w)).astype(np.float64)
    return np.clip(y + r_hat, 0.0, 1.0)
