"""Server-side codec for the v1 wire protocol.

Independent of the engine's client codec on purpose: both sides serialize
tensors as base64 of the raw little-endian f32 buffer plus an explicit shape,
and the tests hold the two implementations to bit-exact agreement.
"""

from __future__ import annotations

import base64

import numpy as np
import torch
from torch import Tensor

PROTOCOL_VERSION = "v1"
OPS = ("handshake", "encode", "decode", "predict_eps", "adapt")


class WireError(ValueError):
    """Malformed request payload; the service answers 400."""


def tensor_to_wire(t: Tensor) -> dict:
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
    return {
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        "shape": list(arr.shape),
    }


def tensor_from_wire(payload) -> Tensor:
    if not isinstance(payload, dict):
        raise WireError("tensor payload must be an object")
    try:
        raw = base64.b64decode(payload["data"], validate=True)
        shape = [int(v) for v in payload["shape"]]
    except (KeyError, TypeError, ValueError) as e:
        raise WireError(f"malformed tensor payload: {e}") from e
    if any(v < 0 for v in shape):
        raise WireError(f"negative dimension in shape {shape}")
    if len(raw) % 4:
        raise WireError(f"payload of {len(raw)} bytes is not a whole number of f32")
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise WireError(f"payload holds {arr.size} floats but shape {shape} needs {expected}")
    return torch.from_numpy(arr.copy()).reshape(shape)


def check_envelope(body, op: str) -> None:
    """Version and op fields every request must carry."""
    if not isinstance(body, dict):
        raise WireError("request body must be a JSON object")
    if body.get("version") != PROTOCOL_VERSION:
        raise WireError(f"unsupported protocol version {body.get('version')!r}")
    if body.get("op") != op:
        raise WireError(f"op {body.get('op')!r} does not match endpoint /{op}")


def conditioning_fields(body) -> tuple[dict | None, str | None]:
    """(camera offsets, prompt) from a request's conditioning object."""
    cond = body.get("conditioning")
    if cond is None:
        return None, None
    if not isinstance(cond, dict):
        raise WireError("conditioning must be an object")
    camera = cond.get("camera")
    if camera is not None:
        if not isinstance(camera, dict):
            raise WireError("conditioning.camera must be an object")
        try:
            camera = {k: float(camera[k]) for k in ("drho", "dtheta", "dphi")}
        except (KeyError, TypeError, ValueError) as e:
            raise WireError(f"conditioning.camera needs drho/dtheta/dphi floats: {e}") from e
    prompt = cond.get("prompt")
    if prompt is not None and not isinstance(prompt, str):
        raise WireError("conditioning.prompt must be a string")
    return camera, prompt
