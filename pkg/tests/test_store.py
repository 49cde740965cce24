import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from dynperturb import store


def test_roundtrip_bytes_identical(tmp_path):
    arrays = {"b": np.arange(6, dtype=np.float64).reshape(2, 3), "a": np.array([1, 2], dtype=np.int64)}
    p1, p2 = tmp_path / "x.ckpt", tmp_path / "y.ckpt"
    store.save_arrays(p1, "thing", arrays, {"k": [1, 2]})
    loaded, meta = store.load_arrays(p1, kind="thing")
    store.save_arrays(p2, "thing", loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert meta == {"k": [1, 2]}
    np.testing.assert_array_equal(loaded["b"], arrays["b"])


def test_wrong_kind_and_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    store.save_arrays(p, "agent", {"w": np.zeros(2)})
    with pytest.raises(store.FormatError):
        store.load_arrays(p, kind="mask")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope\n")
    with pytest.raises(store.FormatError):
        store.load_arrays(bad)


def test_records_header(tmp_path):
    p = tmp_path / "r.jsonl"
    store.write_records(p, "cases", [{"a": 1}, {"a": 2}])
    first = p.read_text().splitlines()[0]
    assert '"format_version": 1' in first or '"format_version":1' in first
    assert store.read_records(p, kind="cases") == [{"a": 1}, {"a": 2}]
    with pytest.raises(store.FormatError):
        store.read_records(p, kind="world")


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, width=64)))
def test_roundtrip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("s") / "a.ckpt"
    store.save_arrays(p, "k", {"x": arr})
    out, _ = store.load_arrays(p)
    assert out["x"].tobytes() == np.ascontiguousarray(arr).tobytes()
    assert out["x"].shape == arr.shape
