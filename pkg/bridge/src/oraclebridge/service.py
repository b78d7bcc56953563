"""The bridge service: five POST endpoints over a threading HTTP server.

A model behind the service speaks wire-level semantics: conditioning arrives
as camera offsets relative to the reference view plus an optional prompt, and
the model decides what to do with them. The mock model reconstructs absolute
cameras and defers to the engine's synthetic target-image oracle, so an
engine run against this service matches the local-oracle run up to the f32
transport round trip.

Requests are serialized through one lock; the engine never calls a single
oracle concurrently, and the adapter state must not be raced by stray
clients.
"""

from __future__ import annotations

import importlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import torch
from torch import Tensor

from distillfield.diffusion import (
    CAP_ADAPT,
    CAP_TEXT,
    CAP_VIEW,
    Conditioning,
    TargetImageOracle,
    build_schedule,
)
from distillfield.errors import OracleError
from distillfield.render import Camera
from distillfield.scenes import SceneSpec, scene_field, render_target

from .wire import (
    OPS,
    WireError,
    check_envelope,
    conditioning_fields,
    tensor_from_wire,
    tensor_to_wire,
)


class CapabilityMismatch(Exception):
    """The request asks for something this model does not do; answers 409."""


class TargetImageModel:
    """Wire-facing adapter around the engine's synthetic oracle.

    Reconstructs absolute cameras from relative offsets using its reference
    view; the render resolution comes from the tensor itself. Adaptation
    draws noise from a server-local seeded generator, so a given request
    sequence is reproducible across server restarts.
    """

    def __init__(self, oracle: TargetImageOracle, reference_camera: Camera, seed: int = 0):
        self.oracle = oracle
        self.reference_camera = reference_camera
        self.schedule = oracle.schedule
        self.generator = torch.Generator().manual_seed(seed)

    @property
    def capabilities(self):
        return self.oracle.capabilities

    @property
    def latent_shape(self):
        return self.oracle.latent_shape

    @property
    def schedule_info(self) -> dict:
        return {
            "profile": self.schedule.profile,
            "num_steps": self.schedule.num_steps,
            "weight_mode": self.schedule.weight_mode,
        }

    def _camera(self, offsets: dict, height: int, width: int) -> Camera:
        ref = self.reference_camera
        near = ref.near + offsets["drho"]
        far = ref.far + offsets["drho"]
        if near <= 0.0:
            raise WireError(f"camera offset drho={offsets['drho']} puts the near plane at {near}")
        return Camera(
            rho=ref.rho + offsets["drho"],
            theta=ref.theta + offsets["dtheta"],
            phi=ref.phi + offsets["dphi"],
            fov_y=ref.fov_y,
            width=width,
            height=height,
            near=near,
            far=far,
        )

    def _conditioning(self, x: Tensor, camera: dict | None, prompt: str | None) -> Conditioning:
        if x.ndim != 3 or x.shape[-1] != 3:
            raise WireError(f"expected an (H, W, 3) tensor, got shape {tuple(x.shape)}")
        if camera is None:
            raise CapabilityMismatch("this model predicts from camera conditioning only")
        h, w = int(x.shape[0]), int(x.shape[1])
        return Conditioning(camera=self._camera(camera, h, w), prompt=prompt)

    def encode(self, image: Tensor) -> Tensor:
        return image

    def decode(self, latent: Tensor) -> Tensor:
        return latent

    def predict_eps(
        self, x_t: Tensor, t: int, camera: dict | None, prompt: str | None, guidance_scale: float
    ) -> Tensor:
        if not 0 <= t < self.schedule.num_steps:
            raise WireError(f"timestep {t} outside [0, {self.schedule.num_steps})")
        return self.oracle.predict_eps(x_t, t, self._conditioning(x_t, camera, prompt))

    def adapt(
        self, observation: Tensor, camera: dict | None, prompt: str | None, guidance_scale: float
    ) -> float:
        if not self.oracle.supports(CAP_ADAPT):
            raise CapabilityMismatch("this model has no adaptable capability")
        cond = self._conditioning(observation, camera, prompt)
        return self.oracle.adapt([observation], [cond], self.schedule, self.generator)


def mock_model(
    scene: str = "textured-sphere",
    texture: str = "rainbow",
    radius: float = 0.5,
    density: float = 80.0,
    samples_per_ray: int = 64,
    rho: float = 1.8,
    theta_deg: float = 90.0,
    phi: float = 0.0,
    fov_deg: float = 45.0,
    width: int = 64,
    height: int = 64,
    margin: float = 0.8,
    num_steps: int = 1000,
    profile: str = "linear-beta",
    weight_mode: str = "sigma_sq",
    adaptable: bool = False,
    seed: int = 0,
) -> TargetImageModel:
    """Target-image model over an analytic scene, ready for make_server."""
    import math

    spec = SceneSpec(kind=scene, radius=radius, density=density, texture=texture)
    field = scene_field(spec)
    reference = Camera(
        rho=rho,
        theta=math.radians(theta_deg),
        phi=phi,
        fov_y=math.radians(fov_deg),
        width=width,
        height=height,
        near=max(rho - margin, 0.05),
        far=rho + margin,
    )
    schedule = build_schedule(num_steps, profile, weight_mode)
    caps = {CAP_VIEW, CAP_TEXT}
    if adaptable:
        caps.add(CAP_ADAPT)
    oracle = TargetImageOracle(
        lambda cam: render_target(field, cam, samples_per_ray).color,
        schedule,
        capabilities=frozenset(caps),
    )
    return TargetImageModel(oracle, reference, seed=seed)


def load_model(config_path):
    """Build a real model from a JSON config naming a factory.

    The config is {"factory": "package.module:callable", "kwargs": {...}};
    the factory returns a wire-facing model (same duck type as
    TargetImageModel). Checkpoint paths and device choices live in kwargs,
    so the bridge never hardcodes a model zoo.
    """
    with open(config_path) as fh:
        config = json.load(fh)
    try:
        target = config["factory"]
        module_name, _, attr = target.partition(":")
        if not module_name or not attr:
            raise ValueError(f"factory {target!r} is not module:callable")
    except (KeyError, TypeError, ValueError) as e:
        raise SystemExit(f"bad model config {config_path}: {e}")
    factory = getattr(importlib.import_module(module_name), attr)
    return factory(**config.get("kwargs", {}))


class _Handler(BaseHTTPRequestHandler):
    server: "BridgeServer"

    def log_message(self, fmt, *args):
        if self.server.verbose:
            super().log_message(fmt, *args)

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        op = self.path.strip("/")
        if op not in OPS:
            self._reply(400, {"error": f"unknown op {op!r}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            check_envelope(body, op)
            with self.server.lock:
                reply = self._dispatch(op, body)
        except WireError as e:
            self._reply(400, {"error": str(e)})
        except CapabilityMismatch as e:
            self._reply(409, {"error": str(e)})
        except (OracleError, json.JSONDecodeError) as e:
            self._reply(400, {"error": str(e)})
        except Exception as e:  # noqa: BLE001 - model failure is the 500 contract
            self._reply(500, {"error": f"{type(e).__name__}: {e}"})
        else:
            self._reply(200, reply)

    def _dispatch(self, op: str, body: dict) -> dict:
        model = self.server.model
        if op == "handshake":
            latent = model.latent_shape
            return {
                "capabilities": sorted(model.capabilities),
                "latent_shape": list(latent) if latent is not None else None,
                "schedule": dict(model.schedule_info),
            }
        if op == "encode":
            return {"tensor": tensor_to_wire(model.encode(tensor_from_wire(body.get("tensor"))))}
        if op == "decode":
            return {"tensor": tensor_to_wire(model.decode(tensor_from_wire(body.get("tensor"))))}

        camera, prompt = conditioning_fields(body)
        scale = body.get("guidance_scale", 1.0)
        if not isinstance(scale, (int, float)):
            raise WireError("guidance_scale must be a number")
        if op == "predict_eps":
            x_t = tensor_from_wire(body.get("tensor"))
            t = body.get("t")
            if not isinstance(t, int):
                raise WireError("t must be an integer timestep")
            eps = model.predict_eps(x_t, t, camera, prompt, float(scale))
            return {"tensor": tensor_to_wire(eps)}
        loss = model.adapt(tensor_from_wire(body.get("tensor")), camera, prompt, float(scale))
        return {"loss": float(loss)}


class BridgeServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, model, verbose: bool = False):
        super().__init__(address, _Handler)
        self.model = model
        self.verbose = verbose
        self.lock = threading.Lock()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def make_server(model, host: str = "127.0.0.1", port: int = 0, verbose: bool = False) -> BridgeServer:
    """Bind and return the server without entering its loop; port 0 picks a free one."""
    return BridgeServer((host, port), model, verbose=verbose)


def mock_serve(port: int, verbose: bool = True, **mock_kwargs) -> None:
    """Run the synthetic oracle service until interrupted."""
    server = make_server(mock_model(**mock_kwargs), port=port, verbose=verbose)
    print(f"mock oracle at {server.url}", flush=True)
    server.serve_forever()


def serve(port: int, model_config, verbose: bool = True) -> None:
    """Run a real-model service until interrupted."""
    server = make_server(load_model(model_config), port=port, verbose=verbose)
    print(f"oracle bridge at {server.url}", flush=True)
    server.serve_forever()
