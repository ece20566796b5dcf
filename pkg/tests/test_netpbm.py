import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sirad.netpbm import (
    HeaderError,
    TruncatedError,
    UnsupportedMaxvalError,
    decode,
    encode,
    load_image,
    quantize,
    write_image,
)


@given(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9), st.data())
def test_round_trip(c, h, w, data):
    pixels = data.draw(arrays(np.uint8, (c, h, w)))
    buf = encode(pixels)
    assert buf.startswith(b"P5" if c == 1 else b"P6")
    np.testing.assert_array_equal(decode(buf), pixels)


def test_header_comments_and_whitespace():
    buf = b"P5 # a comment\n 3\t2 # dims\n255\n" + bytes(range(6))
    np.testing.assert_array_equal(decode(buf)[0], [[0, 1, 2], [3, 4, 5]])


def test_bad_magic_offset_zero():
    with pytest.raises(HeaderError) as e:
        decode(b"P2\n1 1\n255\n0")
    assert e.value.offset == 0


def test_maxval_rejected():
    with pytest.raises(UnsupportedMaxvalError):
        decode(b"P5\n1 1\n65535\n\x00\x00")


def test_truncation_reports_offset():
    buf = b"P5\n2 2\n255\n" + b"\x01\x02\x03"
    with pytest.raises(TruncatedError) as e:
        decode(buf, path="x.pgm")
    assert e.value.offset == len(buf)
    assert "x.pgm" in str(e.value)


@pytest.mark.parametrize("buf", [b"P5", b"P5\nx 2\n255\n", b"P5\n2\n", b"P5\n2 2 255", b"P5\n0 2\n255\n"])
def test_malformed_headers(buf):
    with pytest.raises(HeaderError):
        decode(buf)


def test_quantize_rounds_half_up_and_clips():
    v = np.array([-0.5, 0.0, 0.5 / 255, 1.5 / 255, 1.0, 2.0])
    np.testing.assert_array_equal(quantize(v), [0, 0, 1, 2, 255, 255])


def test_load_and_write(tmp_path):
    img = np.linspace(0, 1, 12).reshape(1, 3, 2, 2)
    path = tmp_path / "x.ppm"
    write_image(path, img)
    back = load_image(path)
    assert back.shape == (1, 3, 2, 2)
    np.testing.assert_allclose(back.data, quantize(img) / 255.0)


def test_encode_rejects_float():
    with pytest.raises(ValueError):
        encode(np.zeros((1, 2, 2)))
