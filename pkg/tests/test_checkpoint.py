import numpy as np
import pytest

from vqplan import checkpoint


def test_round_trip_preserves_bits(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5),
               "empty": np.zeros((0, 3)), "tiny": np.array([5e-324, -0.0, np.pi])}
    meta = {"kind": "test", "config": {"a": 1, "b": [1, 2]}}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors, meta)
    back, m = checkpoint.load(path)
    assert m == meta
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()


def test_save_is_order_independent(tmp_path):
    a = {"x": np.ones(2), "y": np.zeros(3)}
    b = {"y": np.zeros(3), "x": np.ones(2)}
    checkpoint.save(tmp_path / "a", a, {"p": 1, "q": 2})
    checkpoint.save(tmp_path / "b", b, {"q": 2, "p": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_files_rejected(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "junk")
    checkpoint.save(tmp_path / "ok", {"w": np.ones(10)})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-16])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "cut")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.save(tmp_path / "bad", {"a b": np.ones(1)})
