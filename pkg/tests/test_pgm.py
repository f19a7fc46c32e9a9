import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from cvae.pgm import PgmError, encode_pgm, parse_pgm, quantize, read_pgm, write_pgm


def test_p2_with_comments():
    pixels, maxval = parse_pgm(b"P2\n# a comment\n3 2 # dims\n10\n0 5 10\n1 2 3\n")
    assert maxval == 10 and pixels.tolist() == [[0, 5, 10], [1, 2, 3]]


def test_p5_sixteen_bit():
    raw = np.array([[0, 1000], [65535, 7]], dtype=">u2").tobytes()
    pixels, maxval = parse_pgm(b"P5 2 2 65535\n" + raw)
    assert pixels.tolist() == [[0, 1000], [65535, 7]]


def test_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert np.array_equal(np.round(read_pgm(path) * 255).astype(np.uint8), img)


@pytest.mark.parametrize(
    "blob", [b"P6\n1 1\n255\n\0\0\0", b"P5\n2 2\n255\n\0", b"P5\n0 2\n255\n", b"P2\n1 1\n5\n9\n", b"P5\n"]
)
def test_malformed(blob):
    with pytest.raises(PgmError):
        parse_pgm(blob)


def test_quantize_contract():
    assert quantize(np.array([1.0, 0.5, 0.0, 0.002, 0.001])).tolist() == [255, 128, 0, 1, 0]


@given(arrays(float, (4, 3), elements=st.floats(0, 1)))
def test_quantize_error_at_most_half_step(values):
    assert np.all(np.abs(quantize(values) / 255 - values) <= 0.5 / 255 + 1e-12)


def test_encode_rejects_bad_input():
    with pytest.raises(PgmError):
        encode_pgm(np.zeros(3, dtype=np.uint8))
    with pytest.raises(PgmError):
        encode_pgm(np.zeros((2, 2)))
