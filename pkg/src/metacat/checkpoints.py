"""Checkpoint serialization.

Checkpoints are single JSON documents so they stay inspectable with
standard tools. Arrays are embedded as tagged objects carrying dtype,
shape, and a base64 little-endian buffer; float64 payloads round-trip
bit-exactly. Serialization is canonical (sorted keys, fixed separators)
so identical states produce identical bytes.
"""

from __future__ import annotations

import base64
import binascii
import json

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

_ARRAY_TAG = "__ndarray__"
_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


def array_to_json(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported array dtype {name!r}")
    buf = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[name])).tobytes()
    return {_ARRAY_TAG: True, "dtype": name, "shape": list(arr.shape),
            "data": base64.b64encode(buf).decode("ascii")}


def array_from_json(obj: dict) -> np.ndarray:
    name = obj.get("dtype")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported array dtype {name!r}")
    try:
        buf = base64.b64decode(obj["data"], validate=True)
    except (KeyError, binascii.Error) as exc:
        raise CheckpointError(f"corrupt array payload: {exc}") from exc
    shape = tuple(obj.get("shape", ()))
    arr = np.frombuffer(buf, dtype=np.dtype(_DTYPES[name]))
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(
            f"array payload holds {arr.size} items, shape {shape} expected")
    return arr.reshape(shape).astype(arr.dtype, copy=True)


def pack(obj):
    """Recursively replace ndarrays with their tagged JSON form."""
    if isinstance(obj, np.ndarray):
        return array_to_json(obj)
    if isinstance(obj, dict):
        if _ARRAY_TAG in obj:
            raise CheckpointError("dict key collides with the array tag")
        return {str(k): pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [pack(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialize value of type {type(obj).__name__}")


def unpack(obj):
    if isinstance(obj, dict):
        if obj.get(_ARRAY_TAG):
            return array_from_json(obj)
        return {k: unpack(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [unpack(v) for v in obj]
    return obj


def dumps(payload: dict) -> str:
    doc = {"format_version": FORMAT_VERSION, "payload": pack(payload)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def loads(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("checkpoint missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {doc['format_version']!r} unsupported, "
            f"expected {FORMAT_VERSION}")
    if "payload" not in doc:
        raise CheckpointError("checkpoint missing payload")
    return unpack(doc["payload"])


def save_checkpoint(path, payload: dict) -> None:
    text = dumps(payload)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_checkpoint(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    return loads(text)
