"""Wire-tensor codec: base64 of raw little-endian float32, row-major."""

from __future__ import annotations

import base64

import numpy as np


class WireError(ValueError):
    """Malformed wire tensor; the message names the offending field."""

    def __init__(self, field: str, why: str):
        super().__init__(f"field '{field}': {why}")
        self.field = field


def encode(arr: np.ndarray) -> dict:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "f32",
        "data": base64.b64encode(arr32.tobytes()).decode("ascii"),
    }


def decode(obj, field: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise WireError(field, "expected a wire-tensor object")
    if obj.get("dtype") != "f32":
        raise WireError(field, f"unsupported dtype {obj.get('dtype')!r}")
    shape = obj.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise WireError(field, f"invalid shape {shape!r}")
    try:
        raw = base64.b64decode(obj.get("data", ""), validate=True)
    except Exception as exc:
        raise WireError(field, f"data is not valid base64: {exc}") from exc
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise WireError(field, f"{len(raw)} bytes for shape {shape}, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
