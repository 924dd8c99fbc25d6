import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emofuse.errors import FormatError, NumericError, ShapeError
from emofuse.fmx import FeatureMatrix, read_fmx, write_fmx


def test_round_trip_preserves_shape_and_values(tmp_path, rng):
    mat = FeatureMatrix(rng.standard_normal((17, 5)), [f"d{i}" for i in range(5)])
    path = tmp_path / "m.fmx"
    write_fmx(path, mat, {"source": "unit"})
    back, meta = read_fmx(path)
    assert back.data.shape == (17, 5)
    assert meta["source"] == "unit"
    assert meta["dim_labels"] == [f"d{i}" for i in range(5)]
    # storage is float32, so round trip is exact at float32 resolution
    np.testing.assert_array_equal(back.data, mat.data.astype(np.float32).astype(np.float64))


def test_one_dim_input_promoted_to_row():
    mat = FeatureMatrix(np.arange(4.0), ["a", "b", "c", "d"])
    assert mat.data.shape == (1, 4)
    assert mat.n_frames == 1 and mat.dim == 4


def test_label_count_must_match_columns():
    with pytest.raises(ShapeError):
        FeatureMatrix(np.zeros((2, 3)), ["only", "two"])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.fmx"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        read_fmx(path)


def test_truncated_payload_rejected(tmp_path, rng):
    path = tmp_path / "trunc.fmx"
    write_fmx(path, FeatureMatrix(rng.standard_normal((8, 3)), ["x", "y", "z"]))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        read_fmx(path)


def test_nonfinite_values_rejected():
    data = np.ones((2, 2))
    data[0, 0] = np.nan
    with pytest.raises(NumericError):
        FeatureMatrix(data, ["a", "b"])


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=40),
    d=st.integers(min_value=1, max_value=16),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_any_shape(tmp_path_factory, n, d, seed):
    tmp = tmp_path_factory.mktemp("fmx")
    data = np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)
    mat = FeatureMatrix(data.astype(np.float64), [f"c{i}" for i in range(d)])
    path = tmp / "rt.fmx"
    write_fmx(path, mat)
    back, _ = read_fmx(path)
    np.testing.assert_array_equal(back.data.astype(np.float32), data)
