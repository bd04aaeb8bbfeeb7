import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crossu.errors import IntegrityError
from crossu.tensorio import load_tensors, save_tensors


def test_round_trip(tmp_path):
    path = tmp_path / "a.ct"
    tensors = {
        "w": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b": np.array([1.5, -2.5], dtype=np.float64),
        "step": np.array(7, dtype=np.int64),
        "bytes": np.arange(5, dtype=np.uint8),
    }
    save_tensors(path, tensors, meta={"config": {"dim": 8}})
    loaded, meta = load_tensors(path)
    assert meta == {"config": {"dim": 8}}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_save_load_save_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.ct", tmp_path / "b.ct"
    rng = np.random.default_rng(0)
    tensors = {f"t{i}": rng.standard_normal((i + 1, 3)).astype(np.float32) for i in range(4)}
    save_tensors(p1, tensors, meta={"step": 3, "note": "x"})
    loaded, meta = load_tensors(p1)
    save_tensors(p2, loaded, meta=meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_meta_defaults(tmp_path):
    path = tmp_path / "a.ct"
    save_tensors(path, {"x": np.zeros(1)})
    _, meta = load_tensors(path)
    assert meta == {}


def test_truncated_file(tmp_path):
    path = tmp_path / "a.ct"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_corrupt_header(tmp_path):
    path = tmp_path / "a.ct"
    save_tensors(path, {"x": np.zeros(2, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    data[12] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_wrong_format(tmp_path):
    path = tmp_path / "a.ct"
    import json
    import struct

    header = json.dumps({"format": "other", "tensors": {}, "meta": {}}).encode()
    path.write_bytes(struct.pack("<Q", len(header)) + header)
    with pytest.raises(IntegrityError):
        load_tensors(path)


@given(
    hnp.arrays(
        dtype=st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
        shape=hnp.array_shapes(max_dims=3, max_side=6),
        elements=st.integers(min_value=0, max_value=100),
    )
)
@settings(max_examples=50)
def test_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ct") / "x.ct"
    save_tensors(path, {"a": arr})
    loaded, _ = load_tensors(path)
    np.testing.assert_array_equal(loaded["a"], arr)
    assert loaded["a"].dtype == arr.dtype
