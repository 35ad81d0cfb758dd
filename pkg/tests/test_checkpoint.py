import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from modalign import checkpoint


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=True)))
def test_roundtrip_bitwise(a):
    blob = checkpoint.dumps({"x": a, "y": -a[:1]}, {"step": 3, "note": "ü"})
    arrays_, meta = checkpoint.loads(blob)
    assert arrays_["x"].tobytes() == a.tobytes()
    assert meta == {"step": 3, "note": "ü"}
    assert checkpoint.dumps(arrays_, meta) == blob


def test_insertion_order_does_not_matter():
    a, b = np.arange(3.0), np.ones((2, 2))
    assert checkpoint.dumps({"a": a, "b": b}, {"k": 1, "j": 2}) == checkpoint.dumps({"b": b, "a": a}, {"j": 2, "k": 1})


def test_save_returns_file_hash(tmp_path):
    digest = checkpoint.save(tmp_path / "c.bin", {"w": torch.zeros(2, dtype=torch.float64)}, {})
    assert digest == checkpoint.file_hash(tmp_path / "c.bin")


def test_bad_magic_and_version():
    with pytest.raises(ValueError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + bytes(20))
    blob = bytearray(checkpoint.dumps({}, {}))
    blob[8] = 9
    with pytest.raises(ValueError, match="version"):
        checkpoint.loads(bytes(blob))


def test_tensors_hash_sensitive_to_single_bit():
    t = {"w": torch.zeros(4, dtype=torch.float64)}
    h = checkpoint.tensors_hash(t)
    t["w"][2] = 5e-324
    assert checkpoint.tensors_hash(t) != h
