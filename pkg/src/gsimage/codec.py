"""``.gsi`` bitstream: fixed header plus per-Gaussian fixed-width records.

Header (little-endian)::

    magic "GSI1" | version u8 | width u32 | height u32 | N u32 | kind u8 |
    b u8 | M u8 | B u8 | gamma 3*f32 | beta 3*f32 | codebooks M*B*3 f32 |
    kmeans seed u64 | flags u8

Plain payload: for each Gaussian in order, x and y as binary16 bit patterns
(16 bits each), three b-bit covariance codes, M color indices of
ceil(log2 B) bits; packed MSB-first, zero-padded to a byte boundary.
With flag bit0 set the payload is a bits-back rANS stream instead.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .quant import QuantizedCloud

MAGIC = b"GSI1"
VERSION = 1
FLAG_BITSBACK = 0x01
_FIXED = struct.Struct("<4sBIIIBBBB")
_SEED_FLAGS = struct.Struct("<QB")


class CodecError(Exception):
    pass


class CorruptHeaderError(CodecError):
    pass


class TruncatedPayloadError(CodecError):
    pass


class UnknownVersionError(CodecError):
    pass


class CodeRangeError(CodecError, ValueError):
    pass


def index_bits(codebook_size: int) -> int:
    return max(0, math.ceil(math.log2(codebook_size)))


def record_bits(bits: int = 6, stages: int = 2, codebook_size: int = 8) -> int:
    """Bits per Gaussian: 32 (positions) + 3b + M * ceil(log2 B)."""
    return 32 + 3 * bits + stages * index_bits(codebook_size)


def header_size(stages: int, codebook_size: int) -> int:
    return _FIXED.size + 24 + 12 * stages * codebook_size + _SEED_FLAGS.size


@dataclass
class EncodedImage:
    header: bytes
    payload: bytes
    payload_bits: int

    @property
    def total_bits(self) -> int:
        return 8 * (len(self.header) + len(self.payload))

    def to_bytes(self) -> bytes:
        return self.header + self.payload


def record_fields(qc: QuantizedCloud) -> tuple[np.ndarray, list[int]]:
    """Per-Gaussian unsigned fields (N, 5 + M) and their bit widths."""
    fields = np.concatenate(
        [qc.positions.view(np.uint16).astype(np.int64), qc.cov_codes, qc.color_indices], axis=1
    )
    widths = [16, 16] + [qc.bits] * 3 + [index_bits(qc.codebook_size)] * qc.stages
    return fields, widths


def _check_ranges(fields: np.ndarray, widths) -> None:
    for j, w in enumerate(widths):
        col = fields[:, j]
        if col.min() < 0 or col.max() >= (1 << w):
            raise CodeRangeError(f"field {j} has values outside {w} bits")


def pack_records(fields: np.ndarray, widths) -> bytes:
    bit_cols = []
    for j, w in enumerate(widths):
        shifts = np.arange(w - 1, -1, -1, dtype=np.int64)
        bit_cols.append(((fields[:, j : j + 1] >> shifts) & 1).astype(np.uint8))
    bits = np.concatenate(bit_cols, axis=1).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_records(data: bytes, n: int, widths) -> np.ndarray:
    total = sum(widths)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: n * total].reshape(n, total).astype(np.int64)
    fields = np.empty((n, len(widths)), dtype=np.int64)
    col = 0
    for j, w in enumerate(widths):
        weights = 1 << np.arange(w - 1, -1, -1, dtype=np.int64)
        fields[:, j] = bits[:, col : col + w] @ weights if w else 0
        col += w
    return fields


def cloud_from_fields(fields: np.ndarray, meta: dict) -> QuantizedCloud:
    return QuantizedCloud(
        positions=fields[:, 0:2].astype(np.uint16).view(np.float16),
        cov_codes=fields[:, 2:5],
        color_indices=fields[:, 5:],
        gamma=meta["gamma"],
        beta=meta["beta"],
        codebooks=meta["codebooks"],
        width=meta["width"],
        height=meta["height"],
        kind=meta["kind"],
        bits=meta["bits"],
        seed=meta["seed"],
    )


def encode_header(qc: QuantizedCloud, flags: int = 0) -> bytes:
    m, b = qc.stages, qc.codebook_size
    if not (1 <= qc.bits <= 16) or m > 255 or b > 255:
        raise CodeRangeError("header field out of range")
    return b"".join([
        _FIXED.pack(MAGIC, VERSION, qc.width, qc.height, len(qc), int(qc.kind), qc.bits, m, b),
        np.asarray(qc.gamma, dtype="<f4").tobytes(),
        np.asarray(qc.beta, dtype="<f4").tobytes(),
        np.asarray(qc.codebooks, dtype="<f4").tobytes(),
        _SEED_FLAGS.pack(qc.seed, flags),
    ])


def decode_header(data: bytes) -> tuple[dict, int]:
    """Parse the header; returns ``(meta, header_length)``."""
    if len(data) < _FIXED.size:
        raise TruncatedPayloadError("stream shorter than the fixed header")
    magic, version, width, height, n, kind, bits, m, b = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersionError(f"unsupported version {version}")
    if width < 1 or height < 1 or n < 1 or kind > 1 or not (1 <= bits <= 16) or m < 1 or b < 2:
        raise CorruptHeaderError("inconsistent header fields")
    size = header_size(m, b)
    if len(data) < size:
        raise TruncatedPayloadError("stream shorter than the header")
    off = _FIXED.size
    gamma = np.frombuffer(data, dtype="<f4", count=3, offset=off).astype(np.float32)
    beta = np.frombuffer(data, dtype="<f4", count=3, offset=off + 12).astype(np.float32)
    books = np.frombuffer(data, dtype="<f4", count=m * b * 3, offset=off + 24).astype(np.float32).reshape(m, b, 3)
    seed, flags = _SEED_FLAGS.unpack_from(data, size - _SEED_FLAGS.size)
    if flags & ~FLAG_BITSBACK:
        raise CorruptHeaderError(f"unknown flag bits {flags:#x}")
    meta = dict(width=width, height=height, n=n, kind=kind, bits=bits, stages=m, codebook_size=b,
                gamma=gamma, beta=beta, codebooks=books, seed=seed, flags=flags)
    return meta, size


def encode(qc: QuantizedCloud, bitsback: bool = False) -> EncodedImage:
    qc.validate()
    fields, widths = record_fields(qc)
    _check_ranges(fields, widths)
    if bitsback:
        from .bitsback import bb_encode

        payload = bb_encode(qc)
        return EncodedImage(encode_header(qc, FLAG_BITSBACK), payload, 8 * len(payload))
    return EncodedImage(encode_header(qc), pack_records(fields, widths), len(qc) * sum(widths))


def decode(data: bytes) -> QuantizedCloud:
    data = bytes(data)
    meta, off = decode_header(data)
    payload = data[off:]
    if meta["flags"] & FLAG_BITSBACK:
        from .bitsback import bb_decode

        return bb_decode(payload, meta)
    widths = [16, 16] + [meta["bits"]] * 3 + [index_bits(meta["codebook_size"])] * meta["stages"]
    expected = -(-meta["n"] * sum(widths) // 8)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CorruptHeaderError(f"{len(payload) - expected} trailing bytes after the payload")
    qc = cloud_from_fields(unpack_records(payload, meta["n"], widths), meta)
    try:
        qc.validate()
    except ValueError as exc:
        raise CorruptHeaderError(str(exc)) from exc
    return qc


def bpp(encoded: EncodedImage, width: int, height: int) -> float:
    """Stored bits (header + payload, including padding) per pixel."""
    return encoded.total_bits / (width * height)


def write_gsi(path, qc: QuantizedCloud, bitsback: bool = False) -> EncodedImage:
    enc = encode(qc, bitsback)
    with open(path, "wb") as fh:
        fh.write(enc.to_bytes())
    return enc


def read_gsi(path) -> QuantizedCloud:
    with open(path, "rb") as fh:
        return decode(fh.read())
