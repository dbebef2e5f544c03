"""Lossless stages and uplink wire formats.

Federated QSGD wire layout (bits, MSB-first within bytes, zero-padded to a
whole byte)::

    norm      32 bits, IEEE-754 binary32, little-endian byte order
    dim       omega(dim + 1)
    level     omega(level)
    nonzeros  omega(nnz + 1)
    signs     nnz bits, coordinate order, 1 = negative
    tokens    omega(t) for t in rle_encode(bins)

The two baseline layouts (FedPAQ and FxPQ + DEFLATE) share a byte-aligned raw
serialization: binary32 norm, uint32 dim, uint32 level, then every coordinate
as a signed two's-complement integer of the minimal whole-byte width.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .quantizers import QuantizedUpdate


class CodecError(ValueError):
    """Raised on malformed or truncated encoded data."""


@dataclass(frozen=True)
class EncodedBlob:
    data: bytes
    bit_length: int

    def __post_init__(self):
        if len(self.data) != (self.bit_length + 7) // 8:
            raise CodecError(f"{len(self.data)} bytes cannot hold exactly {self.bit_length} bits")

    def __len__(self) -> int:
        return len(self.data)


# -- zero run-length encoding --------------------------------------------------


def rle_encode(bins: Sequence[int]) -> list[int]:
    """Encode each nonzero as ``(zeros_since_previous + 1, value)`` and close
    with ``1, trailing_zeros + 1``. Every token is >= 1.
    """
    arr = np.asarray(bins, dtype=np.int64).ravel()
    if arr.size and arr.min() < 0:
        raise CodecError("run-length input must be nonnegative")
    nz = np.flatnonzero(arr)
    gaps = np.diff(nz, prepend=-1)  # gap + 1
    tokens = np.empty(2 * nz.size, dtype=np.int64)
    tokens[0::2] = gaps
    tokens[1::2] = arr[nz]
    last = nz[-1] if nz.size else -1
    out = tokens.tolist()
    out += [1, int(arr.size - last - 1) + 1]
    return out


def rle_decode(tokens: Sequence[int], expected_dim: int) -> list[int]:
    """Invert :func:`rle_encode`. The final two tokens are the terminator."""
    toks = list(tokens)
    if len(toks) < 2 or len(toks) % 2:
        raise CodecError(f"truncated run-length stream ({len(toks)} tokens)")
    if toks[-2] != 1:
        raise CodecError("run-length stream lacks terminator")
    out = _expand_runs(toks[:-2], toks[-1], expected_dim)
    return out.tolist()


def _expand_runs(pairs: Sequence[int], trailing_token: int, dim: int) -> np.ndarray:
    if any(t < 1 for t in pairs) or trailing_token < 1:
        raise CodecError("run-length tokens must be >= 1")
    gaps = np.asarray(pairs[0::2], dtype=np.int64)
    values = np.asarray(pairs[1::2], dtype=np.int64)
    positions = np.cumsum(gaps) - 1
    total = (int(positions[-1]) + 1 if positions.size else 0) + trailing_token - 1
    if total != dim:
        raise CodecError(f"run-length stream covers {total} entries, expected {dim}")
    out = np.zeros(dim, dtype=np.int64)
    out[positions] = values
    return out


# -- Elias omega -----------------------------------------------------------------


@lru_cache(maxsize=1 << 16)
def omega_code(n: int) -> str:
    if n < 1:
        raise CodecError(f"Elias omega codes positive integers only, got {n}")
    code = "0"
    while n > 1:
        b = bin(n)[2:]
        code = b + code
        n = len(b) - 1
    return code


def elias_encode(tokens: Iterable[int]) -> str:
    """Concatenated Elias omega codes as a string of '0'/'1' characters."""
    return "".join([omega_code(int(t)) for t in tokens])


class BitReader:
    """Sequential reader over a '0'/'1' string."""

    def __init__(self, bits: str, pos: int = 0):
        self.bits = bits
        self.pos = pos

    def remaining(self) -> int:
        return len(self.bits) - self.pos

    def read_bits(self, n: int) -> str:
        end = self.pos + n
        if end > len(self.bits):
            raise CodecError(f"read of {n} bits overruns buffer at bit {self.pos}")
        chunk = self.bits[self.pos:end]
        self.pos = end
        return chunk

    def read_omega(self) -> int:
        bits = self.bits
        size = len(bits)
        pos = self.pos
        n = 1
        while True:
            if pos >= size:
                raise CodecError("Elias omega code word overruns buffer")
            if bits[pos] == "0":
                self.pos = pos + 1
                return n
            end = pos + n + 1
            if end > size:
                raise CodecError("Elias omega code word overruns buffer")
            n = int(bits[pos:end], 2)
            pos = end

    def read_omegas(self, count: int) -> list[int]:
        return [self.read_omega() for _ in range(count)]


def elias_decode(bits: str, count: int | None = None) -> list[int]:
    """Decode Elias omega code words.

    With ``count`` given, exactly that many tokens are read and any remaining
    bits are ignored. Without it the whole string is decoded; since a lone
    '0' is the code for 1, trailing zero padding would decode as extra 1s.
    """
    reader = BitReader(bits)
    if count is not None:
        return reader.read_omegas(count)
    out = []
    while reader.remaining():
        out.append(reader.read_omega())
    return out


# -- bit/byte conversion -----------------------------------------------------------


def bits_to_bytes(bits: str) -> bytes:
    nbytes = (len(bits) + 7) // 8
    if nbytes == 0:
        return b""
    padded = bits.ljust(8 * nbytes, "0")
    return int(padded, 2).to_bytes(nbytes, "big")


def bytes_to_bits(data: bytes) -> str:
    if not data:
        return ""
    return bin(int.from_bytes(data, "big"))[2:].zfill(8 * len(data))


# -- Federated QSGD wire format --------------------------------------------------------


def _norm_bits(norm: float) -> str:
    return bytes_to_bits(struct.pack("<f", norm))


def pack_update(u: QuantizedUpdate) -> EncodedBlob:
    bins = u.bins
    nz = np.flatnonzero(bins)
    signs = "".join(np.where(u.signs[nz] < 0, "1", "0").tolist())
    bits = "".join(
        (
            _norm_bits(u.norm),
            omega_code(u.dim + 1),
            omega_code(u.level),
            omega_code(nz.size + 1),
            signs,
            elias_encode(rle_encode(bins)),
        )
    )
    return EncodedBlob(bits_to_bytes(bits), len(bits))


def unpack_update(blob: EncodedBlob | bytes) -> QuantizedUpdate:
    data = blob.data if isinstance(blob, EncodedBlob) else bytes(blob)
    if len(data) < 4:
        raise CodecError("blob shorter than the norm field")
    (norm,) = struct.unpack("<f", data[:4])
    reader = BitReader(bytes_to_bits(data), pos=32)
    dim = reader.read_omega() - 1
    level = reader.read_omega()
    nnz = reader.read_omega() - 1
    if nnz > dim:
        raise CodecError(f"{nnz} nonzeros in a {dim}-dimensional update")
    sign_bits = reader.read_bits(nnz)
    tokens = reader.read_omegas(2 * nnz + 2)
    if tokens[-2] != 1:
        raise CodecError("run-length stream lacks terminator")
    if reader.remaining() >= 8 or "1" in reader.bits[reader.pos:]:
        raise CodecError("unexpected data after token stream")
    bins = _expand_runs(tokens[:-2], tokens[-1], dim)
    signs = np.ones(dim, dtype=np.int8)
    if nnz:
        neg = np.frombuffer(sign_bits.encode(), dtype=np.uint8) == ord("1")
        signs[np.flatnonzero(bins)[neg]] = -1
    try:
        return QuantizedUpdate(level, float(norm), signs, bins)
    except ValueError as exc:
        raise CodecError(f"decoded update is invalid: {exc}") from exc


# -- baseline layouts ---------------------------------------------------------------------

_RAW_HEADER = struct.Struct("<fII")


def coordinate_width(level: int) -> int:
    """Whole bytes needed for a signed integer in ``[-level, level]``."""
    return max(1, math.ceil(math.log2(2 * level + 1) / 8))


def _raw_serialize(u: QuantizedUpdate) -> bytes:
    width = coordinate_width(u.level)
    values = (u.signs.astype(np.int64) * u.bins).astype("<i8")
    body = values.view(np.uint8).reshape(-1, 8)[:, :width].tobytes()
    return _RAW_HEADER.pack(u.norm, u.dim, u.level) + body


def _raw_deserialize(data: bytes) -> QuantizedUpdate:
    if len(data) < _RAW_HEADER.size:
        raise CodecError("raw update shorter than its header")
    norm, dim, level = _RAW_HEADER.unpack_from(data)
    if level < 1:
        raise CodecError("raw update has level 0")
    width = coordinate_width(level)
    body = np.frombuffer(data, dtype=np.uint8, offset=_RAW_HEADER.size)
    if body.size != dim * width:
        raise CodecError(f"raw body has {body.size} bytes, expected {dim * width}")
    wide = np.zeros((dim, 8), dtype=np.uint8)
    wide[:, :width] = body.reshape(dim, width)
    if width < 8:
        negative = wide[:, width - 1] >= 0x80
        wide[negative, width:] = 0xFF
    values = wide.view("<i8").ravel()
    signs = np.where(values < 0, -1, 1).astype(np.int8)
    try:
        return QuantizedUpdate(level, float(norm), signs, np.abs(values))
    except ValueError as exc:
        raise CodecError(f"decoded update is invalid: {exc}") from exc


def fedpaq_pack(u: QuantizedUpdate) -> EncodedBlob:
    data = _raw_serialize(u)
    return EncodedBlob(data, 8 * len(data))


def fedpaq_unpack(blob: EncodedBlob | bytes) -> QuantizedUpdate:
    data = blob.data if isinstance(blob, EncodedBlob) else bytes(blob)
    return _raw_deserialize(data)


def deflate_pack(u: QuantizedUpdate, level: int = 9) -> EncodedBlob:
    """Raw DEFLATE (RFC 1951, no gzip/zlib container) of the FedPAQ layout."""
    comp = zlib.compressobj(level, zlib.DEFLATED, -15)
    data = comp.compress(_raw_serialize(u)) + comp.flush()
    return EncodedBlob(data, 8 * len(data))


def deflate_unpack(blob: EncodedBlob | bytes) -> QuantizedUpdate:
    data = blob.data if isinstance(blob, EncodedBlob) else bytes(blob)
    try:
        raw = zlib.decompress(data, -15)
    except zlib.error as exc:
        raise CodecError(f"DEFLATE stream is corrupt: {exc}") from exc
    return _raw_deserialize(raw)
