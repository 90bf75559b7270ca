"""The binary feature matrix format: exact byte layout and round trips."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histofuse import featurefile


def sample(n=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)).astype(np.float32), rng.integers(0, 2, size=n)


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        m, y = sample()
        path = tmp_path / "f.hfv"
        featurefile.save_features(path, m, y)
        m2, y2 = featurefile.load_features(path)
        np.testing.assert_array_equal(m2, m)
        np.testing.assert_array_equal(y2, y)
        assert m2.dtype == np.float32
        assert y2.dtype == np.uint8

    def test_float64_input_cast_once(self, tmp_path):
        m = np.array([[0.1, 0.2]], dtype=np.float64)
        path = tmp_path / "f.hfv"
        featurefile.save_features(path, m, np.array([1]))
        m2, _ = featurefile.load_features(path)
        np.testing.assert_array_equal(m2, m.astype(np.float32))

    @settings(max_examples=20, deadline=None)
    @given(
        n=st.integers(1, 20),
        d=st.integers(1, 50),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_any_shape(self, tmp_path_factory, n, d, seed):
        m, y = sample(n, d, seed)
        path = tmp_path_factory.mktemp("hfv") / "f.hfv"
        featurefile.save_features(path, m, y)
        m2, y2 = featurefile.load_features(path)
        np.testing.assert_array_equal(m2, m)
        np.testing.assert_array_equal(y2, y)


class TestByteLayout:
    def test_exact_bytes_of_known_matrix(self, tmp_path):
        m = np.array([[1.0, 2.0], [3.0, 4.0]], dtype="<f4")
        y = np.array([0, 1])
        path = tmp_path / "f.hfv"
        featurefile.save_features(path, m, y)
        raw = path.read_bytes()
        assert raw[:4] == b"HFV1"
        assert struct.unpack("<II", raw[4:12]) == (2, 2)
        assert raw[12:28] == m.tobytes()  # row-major float32
        assert raw[28:] == b"\x00\x01"
        assert len(raw) == 4 + 8 + 16 + 2

    def test_file_size_formula(self, tmp_path):
        m, y = sample(n=5, d=7)
        path = tmp_path / "f.hfv"
        featurefile.save_features(path, m, y)
        assert path.stat().st_size == 12 + 5 * 7 * 4 + 5


class TestValidation:
    def test_save_rejects_bad_shapes(self, tmp_path):
        path = tmp_path / "f.hfv"
        with pytest.raises(ValueError, match="2-d"):
            featurefile.save_features(path, np.zeros(3), np.zeros(3, dtype=int))
        with pytest.raises(ValueError, match="2-d"):
            featurefile.save_features(path, np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="labels shape"):
            featurefile.save_features(path, np.zeros((3, 2)), np.zeros(2, dtype=int))

    def test_save_rejects_bad_labels(self, tmp_path):
        with pytest.raises(ValueError, match="0 or 1"):
            featurefile.save_features(tmp_path / "f.hfv", np.zeros((2, 2)), np.array([0, 2]))

    def test_save_rejects_non_finite(self, tmp_path):
        with pytest.raises(ValueError, match="non-finite"):
            featurefile.save_features(
                tmp_path / "f.hfv", np.array([[np.nan, 0.0]]), np.array([0])
            )

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "f.hfv"
        path.write_bytes(b"HFV2" + struct.pack("<II", 1, 1) + b"\x00" * 5)
        with pytest.raises(ValueError, match="bad magic"):
            featurefile.load_features(path)

    def test_load_rejects_short_file(self, tmp_path):
        path = tmp_path / "f.hfv"
        path.write_bytes(b"HFV1")
        with pytest.raises(ValueError, match="too short"):
            featurefile.load_features(path)

    def test_load_rejects_wrong_length(self, tmp_path):
        m, y = sample()
        path = tmp_path / "f.hfv"
        featurefile.save_features(path, m, y)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="expected"):
            featurefile.load_features(path)

    def test_load_rejects_bad_stored_labels(self, tmp_path):
        path = tmp_path / "f.hfv"
        path.write_bytes(b"HFV1" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.5) + b"\x07")
        with pytest.raises(ValueError, match="0 or 1"):
            featurefile.load_features(path)
