import numpy as np
import pytest

from pcn import tensor as T
from pcn.checkpoint import load_checkpoint, save_checkpoint
from pcn.errors import FormatError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 2, 1, 1)), "b": T.Tensor(rng.normal(size=5)), "s": np.float64(np.pi)}
    meta = {"stage": "base", "frozen": True, "ids": [3, 4]}
    path = save_checkpoint(tmp_path / "c.ckpt", tensors, meta)
    back, m = load_checkpoint(path)
    assert m == meta
    assert list(back) == ["a.w", "b", "s"]
    assert back["a.w"].tobytes() == tensors["a.w"].tobytes()
    assert back["b"].tobytes() == tensors["b"].data.tobytes()
    assert back["s"].shape == () and float(back["s"]) == np.pi


def test_same_content_same_bytes(tmp_path):
    t = {"x": np.arange(4.0)}
    save_checkpoint(tmp_path / "1", t, {"b": 1, "a": 2})
    save_checkpoint(tmp_path / "2", t, {"a": 2, "b": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_truncation_and_trailing_bytes(tmp_path):
    p = save_checkpoint(tmp_path / "c", {"x": np.arange(4.0)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)
    p.write_bytes(b"hello")
    with pytest.raises(FormatError):
        load_checkpoint(p)
