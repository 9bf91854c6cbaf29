import json

import numpy as np
import pytest

from metacat import checkpoints
from metacat.errors import CheckpointError


def test_float_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    payload = {
        "weights": {"w1": rng.standard_normal((7, 3)),
                    "b1": rng.standard_normal(3) * 1e-12},
        "steps": np.arange(5, dtype=np.int64),
        "mask": np.array([True, False, True]),
        "note": "hello",
        "lr": 1e-3,
        "epoch": 12,
        "history": [1.0, 2.5],
    }
    path = tmp_path / "ckpt.json"
    checkpoints.save_checkpoint(path, payload)
    back = checkpoints.load_checkpoint(path)
    assert np.array_equal(back["weights"]["w1"], payload["weights"]["w1"])
    assert np.array_equal(back["weights"]["b1"], payload["weights"]["b1"])
    assert back["weights"]["w1"].dtype == np.float64
    assert np.array_equal(back["steps"], payload["steps"])
    assert back["steps"].dtype == np.int64
    assert np.array_equal(back["mask"], payload["mask"])
    assert back["note"] == "hello" and back["lr"] == 1e-3
    assert back["epoch"] == 12 and back["history"] == [1.0, 2.5]


def test_extreme_values_survive(tmp_path):
    arr = np.array([0.0, -0.0, 1e-308, -1e308, np.pi, np.nextafter(1.0, 2.0)])
    path = tmp_path / "c.json"
    checkpoints.save_checkpoint(path, {"a": arr})
    back = checkpoints.load_checkpoint(path)["a"]
    # bit-for-bit, including the sign of zero
    assert arr.tobytes() == back.tobytes()


def test_serialization_is_canonical():
    a = checkpoints.dumps({"b": np.ones(2), "a": 1})
    b = checkpoints.dumps({"a": 1, "b": np.ones(2)})
    assert a == b


def test_document_is_plain_json(tmp_path):
    path = tmp_path / "c.json"
    checkpoints.save_checkpoint(path, {"w": np.zeros((2, 2))})
    doc = json.loads(path.read_text())
    assert doc["format_version"] == checkpoints.FORMAT_VERSION
    entry = doc["payload"]["w"]
    assert entry["dtype"] == "float64" and entry["shape"] == [2, 2]


def test_version_mismatch_raises():
    doc = json.dumps({"format_version": 99, "payload": {}})
    with pytest.raises(CheckpointError):
        checkpoints.loads(doc)


def test_missing_version_raises():
    with pytest.raises(CheckpointError):
        checkpoints.loads(json.dumps({"payload": {}}))


def test_corrupt_json_raises(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        checkpoints.load_checkpoint(path)


def test_corrupt_base64_raises():
    obj = {"__ndarray__": True, "dtype": "float64", "shape": [1],
           "data": "$$$"}
    with pytest.raises(CheckpointError):
        checkpoints.array_from_json(obj)


def test_shape_mismatch_raises():
    good = checkpoints.array_to_json(np.zeros(3))
    good["shape"] = [4]
    with pytest.raises(CheckpointError):
        checkpoints.array_from_json(good)


def test_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoints.load_checkpoint(tmp_path / "nope.json")


def test_unsupported_value_raises():
    with pytest.raises(CheckpointError):
        checkpoints.dumps({"f": object()})


def test_unsupported_dtype_raises():
    with pytest.raises(CheckpointError):
        checkpoints.array_to_json(np.zeros(2, dtype=np.float32))


def test_numpy_scalars_become_plain():
    out = checkpoints.dumps({"x": np.float64(1.5), "n": np.int64(3),
                             "f": np.bool_(True)})
    back = checkpoints.loads(out)
    assert back == {"x": 1.5, "n": 3, "f": True}
