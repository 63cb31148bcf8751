import numpy as np
import pytest

from pointdiffuse.checkpoint import dumps, load_checkpoint, loads, save_checkpoint
from pointdiffuse.data import FormatError
from pointdiffuse.pipeline import PointDiffuse


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.5),
              "ünï": rng.normal(size=(2, 1, 5)).astype(np.float32)}
    save_checkpoint(tmp_path / "m.pdck", arrays)
    back = load_checkpoint(tmp_path / "m.pdck")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k]).tobytes()
        assert back[k].shape == np.shape(arrays[k])


def test_layout():
    blob = dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
    assert blob[:4] == b"PDCK" and blob[4:8] == (1).to_bytes(4, "little")
    assert blob[8:10] == (1).to_bytes(2, "little") and blob[10:11] == b"w" and blob[11] == 1
    assert blob[12:16] == (2).to_bytes(4, "little")
    assert np.frombuffer(blob[16:], "<f4").tolist() == [1.0, 2.0]


def test_errors():
    blob = dumps({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(FormatError, match="bad magic"):
        loads(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="truncated payload"):
        loads(blob[:-1])
    with pytest.raises(FormatError) as e:
        loads(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
    assert e.value.code == "bad_version"


def test_pipeline_save_load(tmp_path, small_cfg, small_pipe, scene):
    small_pipe.save(tmp_path / "m.pdck")
    other = PointDiffuse.load(tmp_path / "m.pdck", small_cfg, 3)
    assert other.to_arrays().keys() == small_pipe.to_arrays().keys()
    a, _ = small_pipe.sample(scene[0], seed=1, T=3)
    b, _ = other.sample(scene[0], seed=1, T=3)
    assert np.array_equal(a, b)
    arrays = small_pipe.to_arrays()
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ValueError):
        other.load_arrays(arrays)
