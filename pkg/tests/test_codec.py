import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsimage.codec import (
    CodeRangeError,
    CorruptHeaderError,
    TruncatedPayloadError,
    UnknownVersionError,
    bpp,
    decode,
    encode,
    header_size,
    record_bits,
)

from conftest import random_qc

FORMAT_EXAMPLE = bytes.fromhex(
    "47 53 49 31 01 08 00 00 00 08 00 00 00 02 00 00"
    "00 00 06 01 02 cd cc 4c 3d cd cc cc 3d cd cc 4c"
    "3d 00 00 80 bf 00 00 00 c0 00 00 80 bf 00 00 00"
    "00 00 00 00 00 00 00 00 00 00 00 00 3f 00 00 80"
    "3e 00 00 80 3f 07 00 00 00 00 00 00 00 00 b8 00"
    "34 00 28 0f e7 40 16 00 10 0b 40"
)


def test_record_bits_defaults():
    assert record_bits() == 56
    assert record_bits(bits=8) == 62
    assert record_bits(stages=1, codebook_size=2) == 51


def test_single_gaussian_is_seven_bytes():
    qc = random_qc(np.random.default_rng(0), 1)
    enc = encode(qc)
    assert enc.payload_bits == 56 and len(enc.payload) == 7
    assert len(enc.header) == header_size(2, 8) == 246


@given(st.integers(0, 2**31), st.integers(1, 200), st.sampled_from([(6, 2, 8), (8, 1, 2), (4, 3, 16), (5, 2, 5)]))
def test_round_trip_exact(seed, n, cfg):
    bits, stages, size = cfg
    qc = random_qc(np.random.default_rng(seed), n, bits=bits, stages=stages, size=size, kind=seed % 2)
    enc = encode(qc)
    assert enc.payload_bits == n * record_bits(bits, stages, size)
    assert len(enc.payload) == -(-enc.payload_bits // 8)
    back = decode(enc.to_bytes())
    assert back.equals(qc)
    assert back.positions.view(np.uint16).tolist() == qc.positions.view(np.uint16).tolist()


def test_decoded_render_bit_identical():
    qc = random_qc(np.random.default_rng(1), 50)
    np.testing.assert_array_equal(decode(encode(qc).to_bytes()).render().pixels, qc.render().pixels)


def test_truncated_stream():
    data = encode(random_qc(np.random.default_rng(2), 10)).to_bytes()
    for cut in (3, 30, len(data) - 1):
        with pytest.raises(TruncatedPayloadError):
            decode(data[:cut])


def test_trailing_bytes_rejected():
    data = encode(random_qc(np.random.default_rng(3), 10)).to_bytes()
    with pytest.raises(CorruptHeaderError):
        decode(data + b"\x00")


def test_flipped_magic_and_version():
    data = bytearray(encode(random_qc(np.random.default_rng(4), 4)).to_bytes())
    bad = bytearray(data)
    bad[0] ^= 0x01
    with pytest.raises(CorruptHeaderError):
        decode(bytes(bad))
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(UnknownVersionError):
        decode(bytes(bad))


def test_code_out_of_range():
    qc = random_qc(np.random.default_rng(5), 4)
    qc.color_indices[0, 0] = 8
    with pytest.raises((CodeRangeError, ValueError)):
        encode(qc)


def test_bpp_linear_in_n():
    rng = np.random.default_rng(6)
    a = encode(random_qc(rng, 1000, width=768, height=512))
    b = encode(random_qc(rng, 2000, width=768, height=512))
    assert len(a.header) == len(b.header)
    assert b.payload_bits == 2 * a.payload_bits
    assert bpp(b, 768, 512) == pytest.approx((8 * 246 + 112000) / 393216)
    assert bpp(b, 768, 512) - bpp(a, 768, 512) == pytest.approx(56000 / 393216)


def test_format_doc_example():
    qc = decode(FORMAT_EXAMPLE)
    assert (qc.width, qc.height, len(qc), int(qc.kind), qc.bits) == (8, 8, 2, 0, 6)
    assert qc.seed == 7
    assert qc.positions[0].tolist() == [-0.5, 0.25]
    assert qc.cov_codes[0].tolist() == [10, 0, 63]
    assert qc.color_indices[0].tolist() == [1]
    np.testing.assert_array_equal(qc.codebooks[0, 1], np.float32([0.5, 0.25, 1.0]))
    assert encode(qc).to_bytes() == FORMAT_EXAMPLE
