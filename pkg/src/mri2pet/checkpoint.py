"""Deterministic checkpoint serialization.

Checkpoints must round-trip bit-exactly and two identical training runs must
produce byte-identical files, so tensors are flattened to raw little-endian
bytes inside a plain pickled structure (no archive timestamps, no
framework-version payloads). Writes are atomic.
"""

from __future__ import annotations

import io
import os
import pickle

import numpy as np
import torch

from .errors import DataError

_TENSOR = "__tensor__"
_NDARRAY = "__ndarray__"


def _pack(obj):
    if isinstance(obj, torch.Tensor):
        array = obj.detach().cpu().numpy()
        return {_TENSOR: (str(array.dtype), array.shape, array.tobytes(order="C"))}
    if isinstance(obj, np.ndarray):
        return {_NDARRAY: (str(obj.dtype), obj.shape, obj.tobytes(order="C"))}
    if isinstance(obj, dict):
        return {key: _pack(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        packed = [_pack(value) for value in obj]
        return packed if isinstance(obj, list) else tuple(packed)
    if isinstance(obj, (int, float, str, bool, bytes, type(None))):
        return obj
    raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def _unpack(obj):
    if isinstance(obj, dict):
        if set(obj) == {_TENSOR}:
            dtype, shape, raw = obj[_TENSOR]
            array = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            return torch.from_numpy(array)
        if set(obj) == {_NDARRAY}:
            dtype, shape, raw = obj[_NDARRAY]
            return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return {key: _unpack(value) for key, value in obj.items()}
    if isinstance(obj, list):
        return [_unpack(value) for value in obj]
    if isinstance(obj, tuple):
        return tuple(_unpack(value) for value in obj)
    return obj


def save_checkpoint(payload: dict, path) -> None:
    path = os.fspath(path)
    buf = io.BytesIO()
    pickle.dump(_pack(payload), buf, protocol=4)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            packed = pickle.load(fh)
    except (pickle.UnpicklingError, EOFError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    return _unpack(packed)
