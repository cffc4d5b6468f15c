"""Lossless coding of binary maps.

Bits are packed MSB-first (-1 -> 0, +1 -> 1), grouped into k-bit symbols
and coded with a canonical Huffman code built on the empirical symbol
frequencies.  The wire layout of an :class:`EncodedPayload` is::

    u8   magic 0xB1
    u8   version
    u8   k
    u64  symbol_count           (little-endian)
    u64  original bit_count
    u32  table entry count      (0 = raw k-bit symbols, no Huffman)
    entries, sorted by symbol:  u64 symbol, u8 code length
    code bitstream, MSB-first, zero-padded to a byte
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BinresError, IntegrityError, ShapeError

__all__ = [
    "BinaryMap",
    "HuffmanTable",
    "EncodedPayload",
    "GROUP_SIZES",
    "pack_bits",
    "unpack_bits",
    "group_symbols",
    "ungroup_symbols",
    "build_huffman",
    "huffman_encode",
    "huffman_decode",
    "raw_encode",
    "encode_map",
    "decode_map",
    "compression_ratio",
    "BitWriter",
    "BitReader",
]

MAGIC = 0xB1
VERSION = 1
GROUP_SIZES = (8, 16, 32, 64)
MAX_CODE_LEN = 64
_HEADER = struct.Struct("<BBBQQI")
_ENTRY = struct.Struct("<QB")
HEADER_BITS = _HEADER.size * 8
ENTRY_BITS = _ENTRY.size * 8


@dataclass(frozen=True)
class BinaryMap:
    dims: Tuple[int, ...]
    bits: bytes
    bit_count: int

    def __post_init__(self):
        if self.bit_count != int(np.prod(self.dims)):
            raise ShapeError(f"bit_count {self.bit_count} != prod(dims {self.dims})")
        if len(self.bits) != (self.bit_count + 7) // 8:
            raise ShapeError(f"{len(self.bits)} bytes cannot hold exactly {self.bit_count} bits")

    def bit_array(self) -> np.ndarray:
        """The bits as a uint8 0/1 array of length ``bit_count``."""
        return np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8), count=self.bit_count)


def pack_bits(values: np.ndarray) -> BinaryMap:
    """Pack a +-1 tensor (row-major) into a :class:`BinaryMap`."""
    values = np.asarray(values)
    ok = (values == 1) | (values == -1)
    if not np.all(ok):
        bad = values[~ok].reshape(-1)[0]
        raise BinresError(f"pack_bits: value {bad!r} is not +-1")
    bits = (values.reshape(-1) > 0).astype(np.uint8)
    return BinaryMap(tuple(int(d) for d in values.shape), np.packbits(bits).tobytes(), int(bits.size))


def unpack_bits(bm: BinaryMap, dtype=np.float32) -> np.ndarray:
    return (bm.bit_array().astype(dtype) * 2 - 1).reshape(bm.dims)


def _check_k(k: int) -> None:
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= 64):
        raise ShapeError(f"group size k must be an int in [1, 64], got {k!r}")


def group_symbols(bits, k: int) -> np.ndarray:
    """Split a bit sequence into k-bit symbols (uint64), zero-padding the tail.

    ``bits`` is a :class:`BinaryMap` or a 0/1 array.
    """
    _check_k(k)
    arr = bits.bit_array() if isinstance(bits, BinaryMap) else np.asarray(bits, dtype=np.uint8).reshape(-1)
    n = -(-arr.size // k)
    padded = np.zeros(n * k, dtype=np.uint8)
    padded[:arr.size] = arr
    if k % 8 == 0:
        by = np.packbits(padded).reshape(n, k // 8)
        wide = np.zeros((n, 8), dtype=np.uint8)
        wide[:, 8 - k // 8:] = by
        return wide.view(">u8").reshape(n).astype(np.uint64)
    weights = [1 << (k - 1 - j) for j in range(k)]
    rows = padded.reshape(n, k).tolist()
    return np.array([sum(w for w, b in zip(weights, row) if b) for row in rows], dtype=np.uint64)


def ungroup_symbols(symbols: np.ndarray, k: int, bit_count: int) -> np.ndarray:
    """Inverse of :func:`group_symbols`; returns the first ``bit_count`` bits."""
    _check_k(k)
    symbols = np.asarray(symbols, dtype=np.uint64)
    if bit_count > symbols.size * k:
        raise IntegrityError(f"{symbols.size} symbols of {k} bits cannot hold {bit_count} bits")
    if k % 8 == 0:
        by = symbols.astype(">u8").view(np.uint8).reshape(-1, 8)[:, 8 - k // 8:]
        return np.unpackbits(by.reshape(-1), count=bit_count)
    out = np.empty(symbols.size * k, dtype=np.uint8)
    for i, s in enumerate(symbols.tolist()):
        for j in range(k):
            out[i * k + j] = (s >> (k - 1 - j)) & 1
    return out[:bit_count]


# ---------------------------------------------------------------------------
# canonical Huffman
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HuffmanTable:
    k: int
    lengths: Dict[int, int]

    def __post_init__(self):
        if sum(2.0 ** -n for n in self.lengths.values()) > 1 + 1e-12:
            raise IntegrityError("code lengths violate the Kraft inequality")

    def sorted_entries(self) -> List[Tuple[int, int]]:
        return sorted(self.lengths.items())

    def codes(self) -> Dict[int, Tuple[int, int]]:
        """symbol -> (code, length), canonical: ordered by (length, symbol)."""
        out = {}
        code = 0
        prev = None
        for sym, n in sorted(self.lengths.items(), key=lambda t: (t[1], t[0])):
            if prev is not None:
                code = (code + 1) << (n - prev)
            out[sym] = (code, n)
            prev = n
        return out

    def to_bytes(self) -> bytes:
        return b"".join(_ENTRY.pack(s, n) for s, n in self.sorted_entries())

    def expected_length(self, counts: Dict[int, int]) -> float:
        total = sum(counts.values())
        return sum(c * self.lengths[s] for s, c in counts.items()) / total


def _code_lengths(counts: Sequence[Tuple[int, int]]) -> Dict[int, int]:
    """Huffman code lengths from (symbol, count) pairs sorted by symbol.

    Ties in the merge order are broken by the smallest symbol in each
    subtree, so the result is a pure function of the frequency table.
    """
    if len(counts) == 1:
        return {counts[0][0]: 1}
    n = len(counts)
    heap = [(c, s, i) for i, (s, c) in enumerate(counts)]
    heapq.heapify(heap)
    children: List[Tuple[int, int]] = []
    while len(heap) > 1:
        w1, s1, a = heapq.heappop(heap)
        w2, s2, b = heapq.heappop(heap)
        children.append((a, b))
        heapq.heappush(heap, (w1 + w2, min(s1, s2), n + len(children) - 1))
    depth = [0] * (n + len(children))
    for node in range(n + len(children) - 1, n - 1, -1):
        a, b = children[node - n]
        depth[a] = depth[b] = depth[node] + 1
    return {s: depth[i] for i, (s, _) in enumerate(counts)}


def symbol_counts(symbols) -> List[Tuple[int, int]]:
    vals, cnt = np.unique(np.asarray(symbols, dtype=np.uint64), return_counts=True)
    return [(int(v), int(c)) for v, c in zip(vals, cnt)]


def build_huffman(symbols, k: int = 16) -> Optional[HuffmanTable]:
    """Optimal canonical prefix code for the symbol stream.

    Returns ``None`` if the optimal code needs a length above 64 bits; the
    caller then falls back to raw coding.
    """
    _check_k(k)
    counts = symbol_counts(symbols)
    if not counts:
        raise BinresError("build_huffman: empty symbol stream")
    lengths = _code_lengths(counts)
    if max(lengths.values()) > MAX_CODE_LEN:
        return None
    return HuffmanTable(k, lengths)


def _bits_to_bytes(bitstr: str) -> bytes:
    if not bitstr:
        return b""
    arr = np.frombuffer(bitstr.encode("ascii"), dtype=np.uint8) - ord("0")
    return np.packbits(arr).tobytes()


@dataclass(frozen=True)
class EncodedPayload:
    k: int
    symbol_count: int
    bit_count: int
    table: Optional[HuffmanTable]  # None -> raw mode
    bitstream: bytes
    code_bits: int
    _decoded: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def is_raw(self) -> bool:
        return self.table is None

    @property
    def table_bits(self) -> int:
        return 0 if self.table is None else ENTRY_BITS * len(self.table.lengths)

    @property
    def total_bits(self) -> int:
        """Header + table + code bits, before byte padding of the bitstream."""
        return HEADER_BITS + self.table_bits + self.code_bits

    def to_bytes(self) -> bytes:
        entries = 0 if self.table is None else len(self.table.lengths)
        head = _HEADER.pack(MAGIC, VERSION, self.k, self.symbol_count, self.bit_count, entries)
        table = b"" if self.table is None else self.table.to_bytes()
        return head + table + self.bitstream

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedPayload":
        if len(data) < _HEADER.size:
            raise IntegrityError(f"payload of {len(data)} bytes is shorter than its header")
        magic, version, k, nsym, nbits, entries = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise IntegrityError(f"bad payload magic 0x{magic:02x}")
        if version != VERSION:
            raise IntegrityError(f"unsupported payload version {version}")
        if k not in GROUP_SIZES:
            raise IntegrityError(f"unsupported group size {k}")
        if nbits > nsym * k or (nsym and nbits <= (nsym - 1) * k):
            raise IntegrityError(f"bit_count {nbits} inconsistent with {nsym} symbols of {k} bits")
        off = _HEADER.size
        table = None
        if entries:
            end = off + entries * _ENTRY.size
            if len(data) < end:
                raise IntegrityError("payload truncated inside its Huffman table")
            lengths = {}
            prev = -1
            for i in range(entries):
                s, n = _ENTRY.unpack_from(data, off + i * _ENTRY.size)
                if s <= prev or not 1 <= n <= MAX_CODE_LEN or (k < 64 and s >> k):
                    raise IntegrityError("malformed Huffman table entry")
                lengths[s] = n
                prev = s
            table = HuffmanTable(k, lengths)
            off = end
        stream = bytes(data[off:])
        symbols, code_bits = _decode_stream(stream, nsym, k, table)
        return cls(k, nsym, nbits, table, stream, code_bits, symbols)


def huffman_encode(symbols, table: HuffmanTable, bit_count: Optional[int] = None) -> EncodedPayload:
    symbols = np.asarray(symbols, dtype=np.uint64)
    codes = {s: format(c, f"0{n}b") for s, (c, n) in table.codes().items()}
    try:
        bitstr = "".join([codes[s] for s in symbols.tolist()])
    except KeyError as exc:
        raise BinresError(f"huffman_encode: symbol {exc.args[0]} not in table support") from None
    if bit_count is None:
        bit_count = int(symbols.size) * table.k
    return EncodedPayload(table.k, int(symbols.size), int(bit_count), table, _bits_to_bytes(bitstr), len(bitstr))


def raw_encode(symbols, k: int, bit_count: Optional[int] = None) -> EncodedPayload:
    symbols = np.asarray(symbols, dtype=np.uint64)
    bits = ungroup_symbols(symbols, k, symbols.size * k)
    if bit_count is None:
        bit_count = int(symbols.size) * k
    return EncodedPayload(k, int(symbols.size), int(bit_count), None, np.packbits(bits).tobytes(), int(symbols.size) * k)


def huffman_decode(payload: EncodedPayload) -> np.ndarray:
    """Decode the symbol stream; raises :class:`IntegrityError` on corruption."""
    if payload._decoded is not None:
        return payload._decoded.copy()
    return _decode_stream(payload.bitstream, payload.symbol_count, payload.k, payload.table)[0]


def _decode_stream(data: bytes, n: int, k: int, table: Optional[HuffmanTable]) -> Tuple[np.ndarray, int]:
    stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if table is None:
        need = n * k
        if stream.size < need or stream.size - need >= 8 or stream[need:].any():
            raise IntegrityError("raw payload length does not match its symbol count")
        return group_symbols(stream[:need], k), need

    entries = sorted(table.lengths.items(), key=lambda t: (t[1], t[0]))
    maxlen = entries[-1][1]
    count = [0] * (maxlen + 1)
    for _, ln in entries:
        count[ln] += 1
    ordered = [s for s, _ in entries]
    out = np.empty(n, dtype=np.uint64)
    bits = stream.tolist()
    pos = 0
    total = len(bits)
    for i in range(n):
        code = first = index = 0
        for ln in range(1, maxlen + 1):
            if pos >= total:
                raise IntegrityError(f"bitstream truncated after {i} of {n} symbols")
            code |= bits[pos]
            pos += 1
            c = count[ln]
            if code - first < c:
                out[i] = ordered[index + code - first]
                break
            index += c
            first = (first + c) << 1
            code <<= 1
        else:
            raise IntegrityError(f"invalid code word at symbol {i}")
    if total - pos >= 8 or any(bits[pos:]):
        raise IntegrityError("trailing data after the last symbol")
    return out, pos


def encode_map(bm: BinaryMap, k: int = 16, allow_raw: bool = True) -> EncodedPayload:
    """Group and Huffman-code a binary map.

    With ``allow_raw`` the raw k-bit form is used whenever it is not larger
    than the Huffman form including its table.
    """
    if k not in GROUP_SIZES:
        raise ShapeError(f"unsupported group size {k}; expected one of {GROUP_SIZES}")
    symbols = group_symbols(bm, k)
    table = build_huffman(symbols, k)
    if table is None:
        return raw_encode(symbols, k, bm.bit_count)
    payload = huffman_encode(symbols, table, bm.bit_count)
    if allow_raw:
        raw = raw_encode(symbols, k, bm.bit_count)
        if raw.total_bits <= payload.total_bits:
            return raw
    return payload


def decode_map(payload: EncodedPayload, dims: Tuple[int, ...]) -> BinaryMap:
    if int(np.prod(dims)) != payload.bit_count:
        raise IntegrityError(f"payload carries {payload.bit_count} bits but dims {dims} need {int(np.prod(dims))}")
    symbols = huffman_decode(payload)
    bits = ungroup_symbols(symbols, payload.k, payload.bit_count)
    return BinaryMap(tuple(dims), np.packbits(bits).tobytes(), payload.bit_count)


def compression_ratio(bm: BinaryMap, payload: EncodedPayload, include_table: bool = True) -> float:
    """Raw bit count over header + table + code bits.

    ``include_table=False`` leaves the Huffman table out, for tables that
    are shipped to the client before streaming starts.
    """
    denom = payload.total_bits if include_table else HEADER_BITS + payload.code_bits
    return bm.bit_count / denom


# ---------------------------------------------------------------------------
# generic MSB-first bit I/O
# ---------------------------------------------------------------------------


class BitWriter:
    def __init__(self):
        self._parts: List[str] = []
        self.nbits = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits:
            self._parts.append(format(value, f"0{nbits}b"))
            self.nbits += nbits

    def write_ue(self, value: int) -> None:
        """Unsigned Exp-Golomb."""
        v = value + 1
        n = v.bit_length()
        self.write(0, n - 1)
        self.write(v, n)

    def write_se(self, value: int) -> None:
        """Signed Exp-Golomb: 0, 1, -1, 2, -2, ... -> 0, 1, 2, 3, 4, ..."""
        self.write_ue(2 * value - 1 if value > 0 else -2 * value)

    def getvalue(self) -> bytes:
        return _bits_to_bytes("".join(self._parts))


class BitReader:
    def __init__(self, data: bytes):
        self._bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
        self.pos = 0

    def read(self, nbits: int) -> int:
        if self.pos + nbits > len(self._bits):
            raise IntegrityError("bitstream truncated")
        v = 0
        for b in self._bits[self.pos:self.pos + nbits]:
            v = (v << 1) | b
        self.pos += nbits
        return v

    def read_ue(self) -> int:
        zeros = 0
        while True:
            if self.pos >= len(self._bits):
                raise IntegrityError("bitstream truncated")
            if self._bits[self.pos]:
                break
            zeros += 1
            self.pos += 1
            if zeros > 64:
                raise IntegrityError("malformed Exp-Golomb code")
        return self.read(zeros + 1) - 1

    def read_se(self) -> int:
        u = self.read_ue()
        return (u + 1) // 2 if u % 2 else -(u // 2)
