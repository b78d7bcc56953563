"""HTTP client for external guidance oracles speaking the v1 wire protocol.

Tensors travel as base64-encoded raw little-endian f32 plus an explicit shape,
so payloads survive the round trip bit-for-bit. Camera conditioning is sent
relative to the reference view. One instance serializes its requests; the
pipeline never calls a single oracle concurrently.
"""

from __future__ import annotations

import base64

import numpy as np
import requests
import torch
from torch import Tensor

from .diffusion import Conditioning, GuidanceOracle
from .errors import OracleConnectivityError, OracleError
from .render import Camera

PROTOCOL_VERSION = "v1"


def tensor_to_wire(t: Tensor) -> dict:
    """Encode a tensor as {"data": base64 raw f32 LE, "shape": [...]}."""
    arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
    return {
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        "shape": list(arr.shape),
    }


def wire_to_tensor(payload: dict) -> Tensor:
    """Decode the wire tensor encoding; raises OracleError on malformed payloads."""
    try:
        raw = base64.b64decode(payload["data"], validate=True)
        shape = [int(v) for v in payload["shape"]]
    except (KeyError, TypeError, ValueError) as e:
        raise OracleError(f"malformed tensor payload: {e}") from e
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise OracleError(
            f"tensor payload holds {arr.size} floats but shape {shape} needs {expected}"
        )
    return torch.from_numpy(arr.copy()).reshape(shape)


def relative_camera(camera: Camera, reference: Camera) -> dict:
    """Spherical offsets of a camera from the reference view."""
    return {
        "drho": camera.rho - reference.rho,
        "dtheta": camera.theta - reference.theta,
        "dphi": camera.phi - reference.phi,
    }


class RemoteOracle(GuidanceOracle):
    """Guidance oracle backed by an HTTP service.

    The handshake pins latent shape, capabilities, and the service's schedule
    profile. A null latent shape means the service works directly on pixels,
    and encode/decode short-circuit to the identity without a wire call.
    """

    def __init__(
        self,
        url: str,
        reference_camera: Camera | None = None,
        guidance_scale: float = 1.0,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.url = url.rstrip("/")
        self.reference_camera = reference_camera
        self.guidance_scale = guidance_scale
        self.timeout = timeout
        self.session = session or requests.Session()

        info = self._post("handshake", {})
        try:
            caps = info["capabilities"]
            latent = info["latent_shape"]
            self.schedule_info = dict(info.get("schedule") or {})
        except (KeyError, TypeError) as e:
            raise OracleConnectivityError(f"{self.url}: malformed handshake ({e})") from e
        self.capabilities = frozenset(str(c) for c in caps)
        self.latent_shape = tuple(int(v) for v in latent) if latent is not None else None

    def _post(self, op: str, body: dict) -> dict:
        request = {"version": PROTOCOL_VERSION, "op": op, **body}
        try:
            resp = self.session.post(f"{self.url}/{op}", json=request, timeout=self.timeout)
        except requests.RequestException as e:
            raise OracleConnectivityError(f"{self.url}/{op}: {e}") from e
        if resp.status_code in (400, 409):
            raise OracleError(f"{self.url}/{op}: HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise OracleConnectivityError(
                f"{self.url}/{op}: HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            return resp.json()
        except ValueError as e:
            raise OracleConnectivityError(f"{self.url}/{op}: non-JSON response ({e})") from e

    def _conditioning_payload(self, conditioning: Conditioning) -> dict:
        camera = None
        if conditioning.camera is not None:
            if self.reference_camera is None:
                raise OracleError("remote conditioning needs a reference camera for offsets")
            camera = relative_camera(conditioning.camera, self.reference_camera)
        return {"prompt": conditioning.prompt, "camera": camera}

    def encode(self, image: Tensor) -> Tensor:
        if self.latent_shape is None:
            return image
        reply = self._post("encode", {"tensor": tensor_to_wire(image)})
        return self._reply_tensor(reply).to(image.dtype)

    def decode(self, latent: Tensor) -> Tensor:
        if self.latent_shape is None:
            return latent
        reply = self._post("decode", {"tensor": tensor_to_wire(latent)})
        return self._reply_tensor(reply).to(latent.dtype)

    def predict_eps(self, x_t: Tensor, t: int, conditioning: Conditioning) -> Tensor:
        reply = self._post(
            "predict_eps",
            {
                "tensor": tensor_to_wire(x_t),
                "t": int(t),
                "conditioning": self._conditioning_payload(conditioning),
                "guidance_scale": self.guidance_scale,
            },
        )
        out = self._reply_tensor(reply).to(x_t.dtype)
        if out.shape != x_t.shape:
            raise OracleConnectivityError(
                f"{self.url}: predict_eps returned shape {tuple(out.shape)} "
                f"for input {tuple(x_t.shape)}"
            )
        return out

    def adapt(
        self,
        observations: list[Tensor],
        conditionings: list[Conditioning],
        schedule,
        generator: torch.Generator | None = None,
    ) -> float:
        # The wire op carries one observation per request; the pipeline's
        # adaptation batches are single renders.
        if len(observations) != 1:
            raise OracleError("remote adaptation takes exactly one observation per call")
        reply = self._post(
            "adapt",
            {
                "tensor": tensor_to_wire(observations[0]),
                "conditioning": self._conditioning_payload(conditionings[0]),
                "guidance_scale": self.guidance_scale,
            },
        )
        try:
            return float(reply["loss"])
        except (KeyError, TypeError, ValueError) as e:
            raise OracleConnectivityError(f"{self.url}/adapt: malformed reply ({e})") from e

    def _reply_tensor(self, reply: dict) -> Tensor:
        try:
            payload = reply["tensor"]
        except (KeyError, TypeError) as e:
            raise OracleConnectivityError(f"{self.url}: reply missing tensor ({e})") from e
        try:
            return wire_to_tensor(payload)
        except OracleError as e:
            raise OracleConnectivityError(f"{self.url}: {e}") from e
