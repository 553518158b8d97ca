"""rANS coder and partial bits-back coding of the (unordered) Gaussian set.

The first K records are coded plainly; they supply the bits from which an
ordering of the remaining N - K records is *decoded*, so the order of those
records carries information that the decoder hands back. Only the multiset of
Gaussians is preserved; that is all the renderer needs.

rANS parameters: 64-bit state kept in [2^55, 2^63), byte-wise renormalization,
every symbol coded at 24-bit precision. The 2^31 gap between the state floor
and the precision keeps the per-symbol coding loss near 1e-9 bits, which
matters for the thousands of non-power-of-two uniform decodes bits-back does.
"""
from __future__ import annotations

import math

from .codec import CodecError, cloud_from_fields, index_bits, record_fields
from .quant import QuantizedCloud

RANS_L = 1 << 55
PRECISION = 24
STATE_BYTES = 8
_TOTAL = 1 << PRECISION
_MASK = _TOTAL - 1


class StreamExhaustedError(CodecError):
    """Decoding ran past the bottom of the stream."""


class CorruptStreamError(CodecError):
    pass


class AnsCoder:
    """Last-in-first-out rANS stack: ``push`` encodes, ``pop`` decodes."""

    def __init__(self, state: int = RANS_L, stream=None):
        self.state = state
        self.stream = list(stream or [])

    def push(self, start: int, freq: int) -> None:
        if freq <= 0 or start < 0 or start + freq > _TOTAL:
            raise ValueError("invalid symbol range")
        x = self.state
        x_max = ((RANS_L >> PRECISION) << 8) * freq
        while x >= x_max:
            self.stream.append(x & 0xFF)
            x >>= 8
        self.state = ((x // freq) << PRECISION) + (x % freq) + start

    def peek(self) -> int:
        return self.state & _MASK

    def pop(self, start: int, freq: int) -> None:
        x = freq * (self.state >> PRECISION) + (self.state & _MASK) - start
        while x < RANS_L:
            if not self.stream:
                raise StreamExhaustedError("bits-back decode needs more initial bits than were coded")
            x = (x << 8) | self.stream.pop()
        self.state = x

    def push_uniform(self, value: int, n: int) -> None:
        if not 0 <= value < n:
            raise ValueError(f"value {value} outside [0, {n})")
        if n > 1:
            start, freq = _slot_range(value, 1, n)
            self.push(start, freq)

    def pop_uniform(self, n: int) -> int:
        if n <= 1:
            return 0
        value = _slot_of(self.peek(), n)
        self.pop(*_slot_range(value, 1, n))
        return value

    def to_bytes(self) -> bytes:
        return self.state.to_bytes(STATE_BYTES, "little") + bytes(self.stream)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AnsCoder":
        if len(data) < STATE_BYTES:
            raise StreamExhaustedError("stream shorter than the coder state")
        state = int.from_bytes(data[:STATE_BYTES], "little")
        if not RANS_L <= state < RANS_L << 8:
            raise CorruptStreamError("coder state outside its normalization interval")
        return cls(state, data[STATE_BYTES:])

    @property
    def num_bits(self) -> int:
        return 8 * (STATE_BYTES + len(self.stream))


def _slot_range(first: int, count: int, total: int) -> tuple[int, int]:
    """Quantized range of slots [first, first + count) out of ``total`` equal slots."""
    if total > _TOTAL:
        raise ValueError(f"alphabet of {total} exceeds the coder precision")
    start = (first * _TOTAL) // total
    end = ((first + count) * _TOTAL) // total
    return start, end - start


def _slot_of(cf: int, total: int) -> int:
    return ((cf + 1) * total - 1) >> PRECISION


class _Fenwick:
    """Counts over sorted distinct keys with prefix sums and rank search."""

    def __init__(self, counts):
        self.n = len(counts)
        self.tree = [0] * (self.n + 1)
        for i, c in enumerate(counts):
            if c:
                self.add(i, c)

    def add(self, i: int, delta: int) -> None:
        i += 1
        while i <= self.n:
            self.tree[i] += delta
            i += i & -i

    def prefix(self, i: int) -> int:
        """Sum of counts[0:i]."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s

    def find(self, slot: int) -> int:
        """Smallest index whose cumulative count exceeds ``slot``."""
        pos = 0
        step = 1 << self.n.bit_length()
        while step:
            nxt = pos + step
            if nxt <= self.n and self.tree[nxt] <= slot:
                pos = nxt
                slot -= self.tree[nxt]
            step >>= 1
        return pos


def log2_factorial(n: int) -> float:
    return math.lgamma(n + 1) / math.log(2)


def rate_saving_bound(n: int) -> float:
    """log2(N!) - log2(N): the best-case saving of bits-back coding for an N-element set."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return log2_factorial(n) - math.log2(n)


def select_k(n: int, record_bits: float) -> int:
    """Smallest K with K * R >= log2((N - K)!)."""
    if record_bits <= 0:
        raise ValueError("record bitrate must be positive")
    for k in range(n + 1):
        if k * record_bits >= log2_factorial(n - k):
            return k
    return n


def expected_saving(n: int, k: int) -> float:
    m = n - k
    return log2_factorial(m) - math.log2(m) if m >= 1 else 0.0


def _record_keys(fields, widths) -> list[int]:
    keys = []
    for row in fields.tolist():
        key = 0
        for v, w in zip(row, widths):
            key = (key << w) | v
        keys.append(key)
    return keys


def _key_fields(key: int, widths) -> list[int]:
    out = []
    for w in reversed(widths):
        out.append(key & ((1 << w) - 1))
        key >>= w
    return out[::-1]


def _push_record(coder: AnsCoder, fields, widths) -> None:
    for v, w in zip(fields, widths):
        coder.push_uniform(v, 1 << w)


def _pop_record(coder: AnsCoder, widths) -> list[int]:
    out = [coder.pop_uniform(1 << w) for w in reversed(widths)]
    return out[::-1]


def _pop_from_multiset(coder: AnsCoder, tree: _Fenwick, remaining: int) -> int:
    slot = _slot_of(coder.peek(), remaining)
    i = tree.find(slot)
    first = tree.prefix(i)
    count = tree.prefix(i + 1) - first
    coder.pop(*_slot_range(first, count, remaining))
    tree.add(i, -1)
    return i


def _push_to_multiset(coder: AnsCoder, tree: _Fenwick, i: int, remaining: int) -> None:
    tree.add(i, 1)
    first = tree.prefix(i)
    count = tree.prefix(i + 1) - first
    coder.push(*_slot_range(first, count, remaining))


def _widths(meta_bits: int, stages: int, codebook_size: int) -> list[int]:
    return [16, 16] + [meta_bits] * 3 + [index_bits(codebook_size)] * stages


def bb_encode(qc: QuantizedCloud, k: int | None = None) -> bytes:
    """Partial bits-back encode of the Gaussian records (payload only, no header)."""
    n_total = len(qc)
    if n_total < 2:
        raise ValueError("bits-back coding needs N >= 2")
    fields, widths = record_fields(qc)
    r = sum(widths)
    k = select_k(n_total, r) if k is None else k
    coder = AnsCoder()
    rows = fields.tolist()
    for row in rows[:k]:
        _push_record(coder, row, widths)

    # trailing records as a multiset over canonically sorted distinct keys
    trailing = _record_keys(fields[k:], widths)
    distinct = sorted(set(trailing))
    pos = {key: i for i, key in enumerate(distinct)}
    counts = [0] * len(distinct)
    for key in trailing:
        counts[pos[key]] += 1
    tree = _Fenwick(counts)
    m = len(trailing)
    chosen = [distinct[_pop_from_multiset(coder, tree, m - j)] for j in range(m)]

    for key in chosen:
        _push_record(coder, _key_fields(key, widths), widths)
    coder.push_uniform(m, n_total + 1)
    return coder.to_bytes()


def bb_decode(data: bytes, meta: dict) -> QuantizedCloud:
    """Invert :func:`bb_encode`; ``meta`` is the parsed ``.gsi`` header."""
    import numpy as np

    n_total = meta["n"]
    widths = _widths(meta["bits"], meta["stages"], meta["codebook_size"])
    coder = AnsCoder.from_bytes(data)
    m = coder.pop_uniform(n_total + 1)
    if m > n_total:
        raise CorruptStreamError("bits-back count exceeds N")
    k = n_total - m
    chosen_rows = [_pop_record(coder, widths) for _ in range(m)][::-1]
    chosen = _record_keys(np.asarray(chosen_rows, dtype=np.int64).reshape(m, len(widths)), widths)

    distinct = sorted(set(chosen))
    pos = {key: i for i, key in enumerate(distinct)}
    tree = _Fenwick([0] * len(distinct))
    for j in range(m - 1, -1, -1):
        _push_to_multiset(coder, tree, pos[chosen[j]], m - j)

    head = [_pop_record(coder, widths) for _ in range(k)][::-1]
    if coder.stream or coder.state != RANS_L:
        raise CorruptStreamError("bits-back stream did not unwind to the initial coder state")
    rows = np.asarray(head + chosen_rows, dtype=np.int64).reshape(n_total, len(widths))
    qc = cloud_from_fields(rows, meta)
    try:
        qc.validate()
    except ValueError as exc:
        raise CorruptStreamError(str(exc)) from exc
    return qc


def multiset_key(qc: QuantizedCloud) -> list[int]:
    """Sorted record keys; equal lists mean equal Gaussian multisets."""
    fields, widths = record_fields(qc)
    return sorted(_record_keys(fields, widths))
