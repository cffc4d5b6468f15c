"""Lossy base codecs producing the compressed video Y.

``ToyDCTCodec`` is a deterministic intra-only 8x8 block-DCT codec with an
integer (fixed-point) transform and an Exp-Golomb run/level bitstream.
``ExternalCodec`` shells out to real encoders (ffmpeg, x264, ...) through
command templates and exchanges raw video through temp files.
"""

from __future__ import annotations

import math
import os
import shlex
import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .entropy import BitReader, BitWriter
from .errors import CodecError, ConfigError, IntegrityError, ShapeError

__all__ = [
    "BaseCodecResult",
    "ToyDCTCodec",
    "ExternalCodec",
    "TMPDIR_ENV",
    "dct_matrix",
    "fdct_int",
    "idct_int",
    "quant_steps",
    "ZIGZAG",
    "to_uint8",
]

TMPDIR_ENV = "BINRES_TMPDIR"

STD_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

TRANSFORM_BITS = 13  # fixed-point precision of the DCT basis
COEF_FRAC = 4  # fractional bits kept on transform coefficients


def _zigzag(n: int = 8) -> np.ndarray:
    order = sorted(((y, x) for y in range(n) for x in range(n)),
                   key=lambda p: (p[0] + p[1], p[0] if (p[0] + p[1]) % 2 else p[1]))
    return np.array([y * n + x for y, x in order])


ZIGZAG = _zigzag()


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis, rows indexed by frequency."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos((2 * x + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_T = np.round(dct_matrix() * (1 << TRANSFORM_BITS)).astype(np.int64)


def _round_shift(v: np.ndarray, shift: int) -> np.ndarray:
    """Divide by 2**shift, rounding half away from zero (int64 in and out)."""
    half = 1 << (shift - 1)
    return np.sign(v) * ((np.abs(v) + half) >> shift)


def _round_div(v: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.sign(v) * ((2 * np.abs(v) + d) // (2 * d))


def fdct_int(blocks: np.ndarray) -> np.ndarray:
    """Integer 2-d DCT of (..., 8, 8) int blocks; result has COEF_FRAC fractional bits."""
    f = _T @ blocks.astype(np.int64) @ _T.T
    return _round_shift(f, 2 * TRANSFORM_BITS - COEF_FRAC)


def idct_int(coefs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fdct_int`, rounded to integer samples."""
    b = _T.T @ coefs.astype(np.int64) @ _T
    return _round_shift(b, 2 * TRANSFORM_BITS + COEF_FRAC)


def quant_steps(quality: float) -> np.ndarray:
    """JPEG-style scaling of the standard luminance matrix; quality in (0, 100]."""
    if not 0 < quality <= 100:
        raise ConfigError(f"toy codec quality must be in (0, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    steps = np.floor((STD_LUMA * scale + 50.0) / 100.0).astype(np.int64)
    return np.maximum(steps, 1)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(frames, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


@dataclass
class BaseCodecResult:
    decoded: np.ndarray  # (N, C, H, W) in [0, 1]
    payload: bytes
    per_frame_bits: List[int]
    descriptor: dict = field(default_factory=dict)

    @property
    def payload_bits(self) -> int:
        return sum(self.per_frame_bits)


def _check_frames(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (N, C, H, W) frame sequence, got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ShapeError(f"pixel values outside [0, 1] (min {x.min()}, max {x.max()})")
    return x


# ---------------------------------------------------------------------------
# toy DCT codec
# ---------------------------------------------------------------------------

_TOY_MAGIC = b"TDCT"
_TOY_HEAD = struct.Struct("<4sBdIBHH")


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // 8, w // 8, 8, 8).transpose(0, 2, 1, 3).reshape(h, w)


def _write_block(bw: BitWriter, zz: List[int], prev_dc: int) -> None:
    bw.write_se(zz[0] - prev_dc)
    nz = [i for i in range(1, 64) if zz[i]]
    bw.write_ue(len(nz))
    last = 0
    for i in nz:
        v = zz[i]
        bw.write_ue(i - last - 1)
        bw.write_ue(abs(v) - 1)
        bw.write(1 if v < 0 else 0, 1)
        last = i


def _read_block(br: BitReader, prev_dc: int) -> np.ndarray:
    zz = np.zeros(64, dtype=np.int64)
    zz[0] = prev_dc + br.read_se()
    count = br.read_ue()
    pos = 0
    for _ in range(count):
        pos += br.read_ue() + 1
        if pos > 63:
            raise IntegrityError("toy codec: AC run past end of block")
        mag = br.read_ue() + 1
        zz[pos] = -mag if br.read(1) else mag
    return zz


@dataclass
class ToyDCTCodec:
    """Deterministic 8x8 integer-DCT intra codec.

    With ``quality=None`` the codec picks the highest quality whose payload
    fits the target bitrate passed to :meth:`encode`.
    """

    quality: Optional[float] = 50.0
    fps: float = 30.0

    kind = "toy_dct"

    def _code(self, x: np.ndarray, quality: float, write: bool = True):
        n, c, h, w = x.shape
        ph, pw = (-h) % 8, (-w) % 8
        xi = to_uint8(x).astype(np.int64)
        if ph or pw:
            xi = np.pad(xi, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
        hp, wp = h + ph, w + pw
        steps = quant_steps(quality)
        qsteps = steps << COEF_FRAC
        decoded = np.empty((n, c, hp, wp), dtype=np.int64)
        segments = []
        for f in range(n):
            bw = BitWriter()
            for ch in range(c):
                blocks = _to_blocks(xi[f, ch]) - 128
                q = _round_div(fdct_int(blocks), qsteps)
                rec = np.clip(idct_int(q * qsteps) + 128, 0, 255)
                decoded[f, ch] = _from_blocks(rec, hp, wp)
                if write:
                    prev = 0
                    for zz in q.reshape(-1, 64)[:, ZIGZAG].tolist():
                        _write_block(bw, zz, prev)
                        prev = zz[0]
            segments.append(bw.getvalue())
        y = decoded[:, :, :h, :w].astype(np.float64) / 255.0
        return y, segments

    def _assemble(self, y, segments, quality, shape) -> BaseCodecResult:
        n, c, h, w = shape
        head = _TOY_HEAD.pack(_TOY_MAGIC, 1, quality, n, c, h, w)
        parts = [struct.pack("<I", len(s)) + s for s in segments]
        per_frame = [8 * len(p) for p in parts]
        per_frame[0] += 8 * len(head)
        return BaseCodecResult(y, head + b"".join(parts), per_frame,
                               {"codec": self.kind, "quality": quality})

    def encode(self, frames, target_bitrate: Optional[float] = None) -> BaseCodecResult:
        x = _check_frames(frames)
        quality = self.quality
        if quality is None:
            if target_bitrate is None:
                raise ConfigError("toy codec needs a quality or a target bitrate")
            quality = self.quality_for_bits(x, target_bitrate * x.shape[0] / self.fps)
        y, segs = self._code(x, quality)
        return self._assemble(y, segs, quality, x.shape)

    def quality_for_bits(self, frames, target_bits: float, iterations: int = 12) -> float:
        """Highest quality (bisection over (0, 100]) whose payload fits ``target_bits``."""
        x = _check_frames(frames)
        bits = lambda q: self._assemble(*self._code(x, q), q, x.shape).payload_bits  # noqa: E731
        lo, hi = 1.0, 100.0
        if bits(hi) <= target_bits:
            return hi
        if bits(lo) > target_bits:
            return lo
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if bits(mid) <= target_bits:
                lo = mid
            else:
                hi = mid
        return lo

    @staticmethod
    def decode(payload: bytes) -> np.ndarray:
        if len(payload) < _TOY_HEAD.size:
            raise IntegrityError("toy codec payload shorter than its header")
        magic, version, quality, n, c, h, w = _TOY_HEAD.unpack_from(payload)
        if magic != _TOY_MAGIC or version != 1:
            raise IntegrityError("not a toy codec payload")
        hp, wp = h + (-h) % 8, w + (-w) % 8
        qsteps = quant_steps(quality) << COEF_FRAC
        inv_zz = np.argsort(ZIGZAG)
        out = np.empty((n, c, hp, wp), dtype=np.int64)
        off = _TOY_HEAD.size
        nblocks = (hp // 8) * (wp // 8)
        for f in range(n):
            if off + 4 > len(payload):
                raise IntegrityError(f"toy codec payload truncated at frame {f}")
            (size,) = struct.unpack_from("<I", payload, off)
            seg = payload[off + 4:off + 4 + size]
            if len(seg) != size:
                raise IntegrityError(f"toy codec payload truncated in frame {f}")
            off += 4 + size
            br = BitReader(seg)
            for ch in range(c):
                prev = 0
                q = np.empty((nblocks, 64), dtype=np.int64)
                for b in range(nblocks):
                    zz = _read_block(br, prev)
                    prev = int(zz[0])
                    q[b] = zz[inv_zz]
                rec = np.clip(idct_int(q.reshape(-1, 8, 8) * qsteps) + 128, 0, 255)
                out[f, ch] = _from_blocks(rec, hp, wp)
        if off != len(payload):
            raise IntegrityError("trailing bytes after the last toy codec frame")
        return out[:, :, :h, :w].astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# external process adapter
# ---------------------------------------------------------------------------


def _rgb_to_yuv420(frames_u8: np.ndarray) -> bytes:
    f = frames_u8.astype(np.float64)
    r, g, b = f[:, 0], f[:, 1], f[:, 2]
    y = 16 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    cb = 128 + (-37.797 * r - 74.203 * g + 112.0 * b) / 255.0
    cr = 128 + (112.0 * r - 93.786 * g - 18.214 * b) / 255.0
    sub = lambda p: 0.25 * (p[:, 0::2, 0::2] + p[:, 1::2, 0::2] + p[:, 0::2, 1::2] + p[:, 1::2, 1::2])  # noqa: E731
    q = lambda p: np.clip(np.floor(p + 0.5), 0, 255).astype(np.uint8)  # noqa: E731
    y, cb, cr = q(y), q(sub(cb)), q(sub(cr))
    return b"".join(y[i].tobytes() + cb[i].tobytes() + cr[i].tobytes() for i in range(len(y)))


def _yuv420_to_rgb(raw: bytes, n: int, h: int, w: int) -> np.ndarray:
    data = np.frombuffer(raw, dtype=np.uint8)
    ys, cs = h * w, (h // 2) * (w // 2)
    out = np.empty((n, 3, h, w), dtype=np.float64)
    for i in range(n):
        base = i * (ys + 2 * cs)
        y = data[base:base + ys].reshape(h, w).astype(np.float64) - 16
        cb = data[base + ys:base + ys + cs].reshape(h // 2, w // 2).repeat(2, 0).repeat(2, 1) - 128.0
        cr = data[base + ys + cs:base + ys + 2 * cs].reshape(h // 2, w // 2).repeat(2, 0).repeat(2, 1) - 128.0
        out[i, 0] = 1.164383 * y + 1.596027 * cr
        out[i, 1] = 1.164383 * y - 0.391762 * cb - 0.812968 * cr
        out[i, 2] = 1.164383 * y + 2.017232 * cb
    return np.clip(np.floor(out + 0.5), 0, 255) / 255.0


@dataclass
class ExternalCodec:
    """Runs an external encoder/decoder pair over raw video files.

    Templates may use ``{input}``, ``{output}``, ``{bitrate}`` (bits/s),
    ``{width}``, ``{height}``, ``{fps}`` and ``{pix_fmt}``.  The encoder reads
    raw frames and writes the compressed stream; the decoder turns that
    stream back into raw frames in the same pixel format.
    """

    encode_cmd: str
    decode_cmd: str
    pix_fmt: str = "rgb24"  # or "yuv420p"
    fps: float = 30.0
    suffix: str = ".bin"

    kind = "external"

    def __post_init__(self):
        if self.pix_fmt not in ("rgb24", "yuv420p"):
            raise ConfigError(f"unsupported raw pixel format {self.pix_fmt!r}")

    def _frame_bytes(self, h: int, w: int) -> int:
        return h * w * 3 if self.pix_fmt == "rgb24" else h * w + 2 * (h // 2) * (w // 2)

    def _write_raw(self, x: np.ndarray, path: Path) -> None:
        u8 = to_uint8(x)
        if self.pix_fmt == "rgb24":
            path.write_bytes(np.ascontiguousarray(u8.transpose(0, 2, 3, 1)).tobytes())
        else:
            if x.shape[2] % 2 or x.shape[3] % 2:
                raise ShapeError("yuv420p needs even frame dims")
            path.write_bytes(_rgb_to_yuv420(u8))

    def _read_raw(self, path: Path, h: int, w: int) -> np.ndarray:
        raw = path.read_bytes()
        per = self._frame_bytes(h, w)
        if len(raw) % per:
            raise IntegrityError(f"decoded raw file size {len(raw)} is not a multiple of the frame size {per}")
        n = len(raw) // per
        if self.pix_fmt == "rgb24":
            u8 = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 3).transpose(0, 3, 1, 2)
            return u8.astype(np.float64) / 255.0
        return _yuv420_to_rgb(raw, n, h, w)

    def _run(self, template: str, **fields) -> None:
        argv = shlex.split(template.format(**fields))
        if not argv or shutil.which(argv[0]) is None:
            raise ConfigError(f"external codec binary not found: {argv[0] if argv else template!r}")
        proc = subprocess.run(argv, capture_output=True)
        if proc.returncode != 0:
            raise CodecError(f"{argv[0]} exited with status {proc.returncode}: "
                             f"{proc.stderr.decode(errors='replace')[-2000:]}")

    def encode(self, frames, target_bitrate: float) -> BaseCodecResult:
        x = _check_frames(frames)
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError("external codecs exchange RGB frames (3 channels)")
        fields = dict(bitrate=int(target_bitrate), width=w, height=h, fps=self.fps, pix_fmt=self.pix_fmt)
        with tempfile.TemporaryDirectory(prefix="binres-", dir=os.environ.get(TMPDIR_ENV)) as tmp:
            src, enc = Path(tmp) / "input.raw", Path(tmp) / f"encoded{self.suffix}"
            self._write_raw(x, src)
            self._run(self.encode_cmd, input=src, output=enc, **fields)
            if not enc.exists():
                raise CodecError(f"encoder did not produce {enc.name}")
            payload = enc.read_bytes()
            y = self._decode_in(Path(tmp), payload, n, h, w)
        bits = 8 * len(payload)
        # the stream carries no per-frame split; spread it evenly
        per_frame = [bits // n + (1 if i < bits % n else 0) for i in range(n)]
        return BaseCodecResult(y, payload, per_frame,
                               {"codec": self.kind, "bitrate": int(target_bitrate), "pix_fmt": self.pix_fmt})

    def _decode_in(self, tmp: Path, payload: bytes, n: int, h: int, w: int) -> np.ndarray:
        enc, dst = tmp / f"stream{self.suffix}", tmp / "decoded.raw"
        enc.write_bytes(payload)
        self._run(self.decode_cmd, input=enc, output=dst, width=w, height=h, fps=self.fps,
                  pix_fmt=self.pix_fmt, bitrate=0)
        y = self._read_raw(dst, h, w)
        if y.shape[0] != n:
            raise IntegrityError(f"external decoder returned {y.shape[0]} frames, expected {n}")
        return y

    def decode(self, payload: bytes, n: int, h: int, w: int) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="binres-", dir=os.environ.get(TMPDIR_ENV)) as tmp:
            return self._decode_in(Path(tmp), payload, n, h, w)
