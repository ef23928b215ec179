import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchflow.ppm import decode, encode, read_ppm, write_ppm


class TestEncode:
    def test_header(self):
        blob = encode(np.zeros((2, 3, 3), np.uint8))
        assert blob.startswith(b"P6\n3 2\n255\n")
        assert len(blob) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3

    def test_float_quantization(self):
        img = np.array([[[0.0, 0.5, 1.0]]], np.float32)
        data = decode(encode(img))
        # 0.5*255 = 127.5 rounds half away from zero to 128
        np.testing.assert_allclose(data[0, 0], [0.0, 128 / 255, 1.0], atol=1e-7)

    def test_out_of_range_clipped(self):
        img = np.array([[[-0.5, 1.5, 0.2]]], np.float32)
        data = decode(encode(img))
        assert data[0, 0, 0] == 0.0
        assert data[0, 0, 1] == 1.0

    def test_bad_shape_and_dtype(self):
        with pytest.raises(ValueError, match="expected"):
            encode(np.zeros((4, 4), np.uint8))
        with pytest.raises(ValueError, match="unsupported dtype"):
            encode(np.zeros((2, 2, 3), np.int32))


class TestDecode:
    def test_comments_and_whitespace(self):
        blob = b"P6 # format\n# a comment line\n 2 1\n# again\n255\n" + bytes(6)
        img = decode(blob)
        assert img.shape == (1, 2, 3)

    def test_truncated_pixels(self):
        blob = encode(np.zeros((2, 2, 3), np.uint8))[:-1]
        with pytest.raises(ValueError, match="truncated"):
            decode(blob)

    def test_truncated_header(self):
        with pytest.raises(ValueError, match="truncated"):
            decode(b"P6\n2")

    def test_wrong_magic_and_maxval(self):
        with pytest.raises(ValueError, match="magic"):
            decode(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ValueError, match="maxval"):
            decode(b"P6\n1 1\n65535\n\x00\x00\x00")


class TestRoundTrip:
    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(1, 8),
        w=st.integers(1, 8),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_uint8_bit_exact(self, h, w, seed):
        img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), np.uint8)
        np.testing.assert_array_equal(decode(encode(img)) * 255, img)

    def test_file_round_trip(self, tmp_path, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
