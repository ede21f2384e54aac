import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfac import fileio
from mfac.core import FormatError, synthetic_gradients


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


class TestMatrixCodec:
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_roundtrip_f64(self, arr):
        out = fileio.decode_matrix(fileio.encode_matrix(arr))
        np.testing.assert_array_equal(out, arr)
        assert out.dtype == np.float64

    def test_roundtrip_f32(self):
        arr = synthetic_gradients(3, 4, 0, dtype=np.float32)
        out = fileio.decode_matrix(fileio.encode_matrix(arr))
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, arr)

    def test_header_layout(self):
        buf = fileio.encode_matrix(np.zeros((2, 3)))
        assert buf[:4] == b"MFAC"
        assert struct.unpack_from("<BBBBQQ", buf, 4) == (1, 1, 0, 0, 2, 3)
        assert len(buf) == 24 + 6 * 8

    @pytest.mark.parametrize("offset,value,match", [
        (0, b"XFAC", "magic"), (4, b"\x02", "version"), (5, b"\x07", "dtype code"),
        (6, b"\x01", "reserved"),
    ])
    def test_corrupt_header(self, offset, value, match):
        buf = bytearray(fileio.encode_matrix(np.ones((1, 2))))
        buf[offset:offset + len(value)] = value
        with pytest.raises(FormatError, match=match):
            fileio.decode_matrix(bytes(buf))

    def test_truncated(self):
        buf = fileio.encode_matrix(np.ones((2, 2)))
        with pytest.raises(FormatError, match="bytes"):
            fileio.decode_matrix(buf[:-1])
        with pytest.raises(FormatError):
            fileio.decode_matrix(buf[:10])


class TestGradientFiles:
    def test_mfacbin_bit_identical(self, tmp_path):
        G = synthetic_gradients(5, 7, 3)
        path = tmp_path / "g.mfac"
        fileio.save_gradients(path, G)
        np.testing.assert_array_equal(fileio.load_gradients(path).rows, G)

    def test_csv_roundtrip_exact(self, tmp_path):
        G = synthetic_gradients(4, 3, 1)
        path = tmp_path / "g.csv"
        fileio.save_gradients(path, G)
        np.testing.assert_array_equal(fileio.load_gradients(path).rows, G)

    def test_widen_on_load(self, tmp_path):
        G = synthetic_gradients(2, 3, 0, dtype=np.float32)
        path = tmp_path / "g.mfac"
        fileio.save_gradients(path, G)
        out = fileio.load_gradients(path, dtype="f64").rows
        assert out.dtype == np.float64
        np.testing.assert_array_equal(out, G.astype(np.float64))

    def test_ragged_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3\n")
        with pytest.raises(FormatError, match="line 2"):
            fileio.load_gradients(path)

    def test_non_numeric_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,x\n")
        with pytest.raises(FormatError):
            fileio.load_gradients(path)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text("1,2\n3,nan\n")
        with pytest.raises(ValueError, match="row 1, column 1"):
            fileio.load_gradients(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            fileio.load_gradients(tmp_path / "nope.mfac")

    def test_csv_limit(self, tmp_path, monkeypatch):
        monkeypatch.setattr(fileio, "CSV_LIMIT", 5)
        path = tmp_path / "big.csv"
        path.write_text("1,2,3\n4,5,6\n")
        with pytest.raises(FormatError, match="mfacbin"):
            fileio.load_gradients(path)


class TestContainer:
    def test_roundtrip(self, tmp_path):
        sections = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5, 2.5]),
                    "c": np.zeros(0), "f": np.ones((2, 2), dtype=np.float32)}
        path = tmp_path / "c.mfac"
        fileio.save_container(path, sections)
        out = fileio.load_container(path)
        assert list(out) == list(sections)
        np.testing.assert_array_equal(out["a"], sections["a"])
        np.testing.assert_array_equal(out["b"], sections["b"][None, :])
        assert out["f"].dtype == np.float32

    def test_trailing_bytes(self):
        buf = fileio.encode_container({"a": np.ones(2)}) + b"\0"
        with pytest.raises(FormatError, match="trailing"):
            fileio.decode_container(buf)

    def test_long_tag(self):
        with pytest.raises(FormatError):
            fileio.encode_container({"ninechars": np.ones(1)})

    def test_plain_matrix_is_not_container(self):
        with pytest.raises(FormatError):
            fileio.decode_container(fileio.encode_matrix(np.ones((1, 1))))
