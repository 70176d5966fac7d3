"""Parameter serialization: JSON map of name -> {shape, row-major data}."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import DataError
from .tensor import Tensor

FORMAT_VERSION = 1


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(params, path):
    """Serialize a mapping name -> Tensor (or ndarray) to JSON."""
    payload = {"format_version": FORMAT_VERSION, "params": {}}
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        payload["params"][name] = {
            "shape": list(arr.shape),
            "data": arr.reshape(-1).tolist(),
        }
    atomic_write_text(path, json.dumps(payload))


def load_params(path):
    """Load a parameter map back into name -> float64 ndarray."""
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported parameter format version {version!r} in {path}")
    out = {}
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise DataError(f"parameter {name}: {data.size} values for shape {shape} in {path}")
        out[name] = data.reshape(shape)
    return out
