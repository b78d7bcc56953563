"""Engine configuration: an INI file with sections [inputs], [field],
[stage1], [stage2], [oracle], [output], parsed into an EngineConfig that can
build every pipeline ingredient. Unknown sections or keys are rejected so
typos fail loudly, and every error names the offending section and key.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .diffusion import (
    CAP_ADAPT,
    CAP_TEXT,
    CAP_VIEW,
    NoiseSchedule,
    TargetImageOracle,
    build_schedule,
)
from .errors import ConfigError
from .field import HashGridConfig
from .losses import LossWeights, ReferenceBundle
from .pipeline import CameraPolicy, KNOWN_LOSSES, StagePlan
from .render import Camera
from .scenes import SceneSpec, TEXTURES, bounding_radius, make_reference_bundle, render_target, scene_field

_STAGE_KEYS = {
    "iterations", "losses", "resolution", "samples_per_ray", "reference_fraction",
    "rho_range", "theta_range_deg", "phi_range_deg", "fov_y_deg", "near_far_margin",
    "lr_grid", "lr_mlp", "beta1", "beta2", "adapt_every", "opacity_threshold",
    "background", "lambda_sds", "lambda_rgb", "lambda_mask", "lambda_depth",
    "lambda_normal", "lambda_reg",
}

_KNOWN_KEYS = {
    "inputs": {
        "scene", "radius", "half_extent", "density", "texture",
        "image", "mask", "depth", "ref_rho", "ref_theta_deg", "ref_phi_deg",
    },
    "field": {
        "num_levels", "base_resolution", "max_resolution", "features_per_level",
        "table_size_log2", "bounding_box", "mlp_hidden", "mlp_layers", "density_bias",
    },
    "stage1": _STAGE_KEYS,
    "stage2": _STAGE_KEYS,
    "oracle": {
        "kind", "url", "guidance_scale", "prompt", "schedule_profile", "num_steps",
        "weight_mode", "stage1_texture", "target_samples_per_ray",
    },
    "output": {
        "dir", "seed", "eval_every", "eval_views", "checkpoint_every", "orbit_views",
    },
}


class _Section:
    """Typed key access over one INI section with error messages naming the key."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.raw = dict(parser[name]) if parser.has_section(name) else {}
        unknown = set(self.raw) - _KNOWN_KEYS[name]
        if unknown:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(unknown))}")

    def _convert(self, key: str, cast, default):
        if key not in self.raw:
            if default is _REQUIRED:
                raise ConfigError(f"[{self.name}] {key} is required")
            return default
        try:
            return cast(self.raw[key])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{self.name}] {key}: {e}") from e

    def str(self, key: str, default=None) -> str:
        return self._convert(key, lambda s: s.strip(), default)

    def int(self, key: str, default=None) -> int:
        return self._convert(key, int, default)

    def float(self, key: str, default=None) -> float:
        return self._convert(key, float, default)

    def floats(self, key: str, default=None) -> tuple:
        return self._convert(key, lambda s: tuple(float(v) for v in s.split(",")), default)


_REQUIRED = object()


@dataclass
class EngineConfig:
    """Everything a pipeline run needs, already validated."""

    seed: int
    scene: SceneSpec
    grid: HashGridConfig
    mlp_hidden: int
    mlp_layers: int
    density_bias: float
    stage1: StagePlan
    stage2: StagePlan
    oracle_kind: str
    oracle_url: str | None
    guidance_scale: float
    prompt: str | None
    schedule_profile: str
    schedule_steps: int
    weight_mode: str
    stage1_texture: str | None
    target_samples_per_ray: int
    output_dir: str
    eval_every: int
    eval_views: int
    checkpoint_every: int
    orbit_views: int

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule_steps, self.schedule_profile, self.weight_mode)

    def build_reference_bundle(self) -> ReferenceBundle:
        ref_cam = self.stage1.camera_policy.reference_camera
        if self.scene.kind == "from-files":
            from .io import read_depth_raster, read_png

            image = read_png(self.scene.image_path)
            if image.dim() == 2:
                image = image.unsqueeze(-1).expand(*image.shape, 3).clone()
            mask_img = read_png(self.scene.mask_path)
            if mask_img.dim() == 3:
                mask_img = mask_img.mean(-1)
            mask = (mask_img > 0.5).to(torch.float32)
            depth_path = str(self.scene.depth_path)
            if depth_path.endswith(".png"):
                depth = read_png(depth_path)
                if depth.dim() == 3:
                    depth = depth.mean(-1)
            else:
                depth = read_depth_raster(depth_path)
            if image.shape[:2] != (ref_cam.height, ref_cam.width):
                raise ConfigError(
                    "[inputs] image: resolution "
                    f"{tuple(image.shape[:2])} != stage1 resolution {(ref_cam.height, ref_cam.width)}"
                )
            return ReferenceBundle(image=image, mask=mask, depth=depth, camera=ref_cam)
        return make_reference_bundle(self.scene, ref_cam, self.target_samples_per_ray)

    def build_oracles(self, schedule: NoiseSchedule, reference_camera: Camera):
        """(stage-1 oracle, stage-2 oracle) per the configured kind."""
        if self.oracle_kind == "remote":
            from .remote import RemoteOracle

            oracle = RemoteOracle(
                self.oracle_url,
                reference_camera=reference_camera,
                guidance_scale=self.guidance_scale,
            )
            return oracle, oracle
        if not self.scene.has_ground_truth:
            raise ConfigError(
                "[oracle] kind: synthetic oracles need an analytic scene; "
                "from-files scenes require kind = remote"
            )
        geo_texture = self.stage1_texture
        geo_field = scene_field(self.scene, geo_texture)
        tex_field = scene_field(self.scene)
        spp = self.target_samples_per_ray
        bg = self.stage1.background
        oracle3d = TargetImageOracle(
            lambda cam: render_target(geo_field, cam, spp, bg).color,
            schedule,
            capabilities=frozenset({CAP_VIEW}),
        )
        oracle2d = TargetImageOracle(
            lambda cam: render_target(tex_field, cam, spp, bg).color,
            schedule,
            capabilities=frozenset({CAP_TEXT, CAP_ADAPT}),
        )
        return oracle3d, oracle2d


def _parse_scene(inputs: _Section) -> SceneSpec:
    kind = inputs.str("scene", "textured-sphere")
    try:
        return SceneSpec(
            kind=kind,
            radius=inputs.float("radius", 0.5),
            half_extent=inputs.float("half_extent", 0.4),
            density=inputs.float("density", 80.0),
            texture=inputs.str("texture", "rainbow"),
            image_path=inputs.str("image", None),
            mask_path=inputs.str("mask", None),
            depth_path=inputs.str("depth", None),
        )
    except ConfigError as e:
        raise ConfigError(f"[inputs] {e}") from e


def _parse_stage(
    section: _Section,
    defaults: dict,
    reference_camera: Camera,
    margin: float,
) -> StagePlan:
    losses = section.str("losses", defaults["losses"])
    enabled = frozenset(name.strip() for name in losses.split(",") if name.strip())
    bad = enabled - set(KNOWN_LOSSES)
    if bad:
        raise ConfigError(f"[{section.name}] losses: unknown name(s) {', '.join(sorted(bad))}")
    try:
        weights = LossWeights(
            lambda_rgb=section.float("lambda_rgb", 5.0),
            lambda_mask=section.float("lambda_mask", 1.0),
            lambda_depth=section.float("lambda_depth", 0.5),
            lambda_normal=section.float("lambda_normal", 0.1),
            lambda_reg=section.float("lambda_reg", 0.1),
            lambda_sds=section.float("lambda_sds", 1.0),
        )
    except ValueError as e:
        raise ConfigError(f"[{section.name}] {e}") from e

    for key, expect in (("rho_range", 2), ("theta_range_deg", 2), ("phi_range_deg", 2), ("background", 3)):
        got = section.floats(key, None)
        if got is not None and len(got) != expect:
            raise ConfigError(f"[{section.name}] {key}: expected {expect} comma-separated numbers")
    theta_lo, theta_hi = section.floats("theta_range_deg", (60.0, 120.0))
    phi_lo, phi_hi = section.floats("phi_range_deg", (0.0, 360.0))
    policy = CameraPolicy(
        reference_camera=reference_camera,
        reference_fraction=section.float("reference_fraction", defaults["reference_fraction"]),
        rho_range=section.floats("rho_range", (1.5, 2.2)),
        theta_range=(math.radians(theta_lo), math.radians(theta_hi)),
        phi_range=(math.radians(phi_lo), math.radians(phi_hi)),
        fov_y=math.radians(section.float("fov_y_deg", 45.0)),
        width=reference_camera.width,
        height=reference_camera.height,
        near_far_margin=margin,
    )
    try:
        return StagePlan(
            iterations=section.int("iterations", defaults["iterations"]),
            enabled_losses=enabled,
            loss_weights=weights,
            camera_policy=policy,
            render_resolution=reference_camera.width,
            samples_per_ray=section.int("samples_per_ray", 96),
            adapt_every=section.int("adapt_every", defaults["adapt_every"]),
            lr_grid=section.float("lr_grid", 1e-2),
            lr_mlp=section.float("lr_mlp", 1e-3),
            betas=(section.float("beta1", 0.9), section.float("beta2", 0.99)),
            background=section.floats("background", (1.0, 1.0, 1.0)),
            opacity_threshold=section.float("opacity_threshold", 0.5),
        )
    except ValueError as e:
        raise ConfigError(f"[{section.name}] {e}") from e


def load_config(path) -> EngineConfig:
    """Parse and validate an engine INI file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    unknown_sections = set(parser.sections()) - set(_KNOWN_KEYS)
    if unknown_sections:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown_sections))}")

    inputs = _Section(parser, "inputs")
    field_sec = _Section(parser, "field")
    stage1_sec = _Section(parser, "stage1")
    stage2_sec = _Section(parser, "stage2")
    oracle = _Section(parser, "oracle")
    output = _Section(parser, "output")

    scene = _parse_scene(inputs)

    box = field_sec.floats("bounding_box", (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0))
    if len(box) != 6:
        raise ConfigError("[field] bounding_box: expected six comma-separated numbers")
    try:
        grid = HashGridConfig(
            num_levels=field_sec.int("num_levels", 16),
            base_resolution=field_sec.int("base_resolution", 16),
            max_resolution=field_sec.int("max_resolution", 2048),
            features_per_level=field_sec.int("features_per_level", 2),
            table_size_log2=field_sec.int("table_size_log2", 19),
            bounding_box=(tuple(box[:3]), tuple(box[3:])),
        )
    except ValueError as e:
        raise ConfigError(f"[field] {e}") from e

    ref_rho = inputs.float("ref_rho", 1.8)
    ref_theta = math.radians(inputs.float("ref_theta_deg", 90.0))
    ref_phi = math.radians(inputs.float("ref_phi_deg", 0.0))
    margin1 = stage1_sec.float("near_far_margin", _default_margin(scene))
    margin2 = stage2_sec.float("near_far_margin", _default_margin(scene))

    res1 = stage1_sec.int("resolution", 64)
    res2 = stage2_sec.int("resolution", 64)
    fov1 = math.radians(stage1_sec.float("fov_y_deg", 45.0))
    fov2 = math.radians(stage2_sec.float("fov_y_deg", 45.0))

    def make_ref(resolution: int, fov: float, margin: float) -> Camera:
        return Camera(
            rho=ref_rho, theta=ref_theta, phi=ref_phi, fov_y=fov,
            width=resolution, height=resolution,
            near=max(ref_rho - margin, 0.05), far=ref_rho + margin,
        )

    ref_cam1 = make_ref(res1, fov1, margin1)
    ref_cam2 = ref_cam1 if (res2 == res1 and fov2 == fov1 and margin2 == margin1) \
        else make_ref(res2, fov2, margin2)

    stage1 = _parse_stage(
        stage1_sec,
        {"iterations": 300, "reference_fraction": 0.25, "adapt_every": 0,
         "losses": "sds3d,rec,depth,normal"},
        ref_cam1, margin1,
    )
    stage2 = _parse_stage(
        stage2_sec,
        {"iterations": 1000, "reference_fraction": 0.0, "adapt_every": 1,
         "losses": "sds2d,opacity_reg"},
        ref_cam2, margin2,
    )
    if stage2.enabled_losses & {"rec", "depth", "normal"} and ref_cam2 is not ref_cam1:
        raise ConfigError(
            "[stage2] losses: reference-view losses need stage2 resolution/fov/margin "
            "to match stage1"
        )

    kind = oracle.str("kind", "synthetic")
    if kind not in ("synthetic", "remote"):
        raise ConfigError(f"[oracle] kind: expected synthetic or remote, got {kind!r}")
    url = os.environ.get("DNF_ORACLE_URL") or oracle.str("url", None)
    if kind == "remote" and not url:
        raise ConfigError("[oracle] url is required for kind = remote")
    profile = oracle.str("schedule_profile", "linear-beta")
    weight_mode = oracle.str("weight_mode", "sigma_sq")
    stage1_texture = oracle.str("stage1_texture", "gray")
    if stage1_texture in ("scene", ""):
        stage1_texture = None
    elif stage1_texture not in TEXTURES:
        raise ConfigError(
            f"[oracle] stage1_texture: expected scene or one of {TEXTURES}, got {stage1_texture!r}"
        )

    return EngineConfig(
        seed=output.int("seed", 0),
        scene=scene,
        grid=grid,
        mlp_hidden=field_sec.int("mlp_hidden", 64),
        mlp_layers=field_sec.int("mlp_layers", 2),
        density_bias=field_sec.float("density_bias", -1.0),
        stage1=stage1,
        stage2=stage2,
        oracle_kind=kind,
        oracle_url=url,
        guidance_scale=oracle.float("guidance_scale", 1.0),
        prompt=oracle.str("prompt", None),
        schedule_profile=profile,
        schedule_steps=oracle.int("num_steps", 1000),
        weight_mode=weight_mode,
        stage1_texture=stage1_texture,
        target_samples_per_ray=oracle.int("target_samples_per_ray", 192),
        output_dir=output.str("dir", "out"),
        eval_every=output.int("eval_every", 0),
        eval_views=output.int("eval_views", 12),
        checkpoint_every=output.int("checkpoint_every", 50),
        orbit_views=output.int("orbit_views", 8),
    )


def _default_margin(scene: SceneSpec) -> float:
    if not scene.has_ground_truth:
        return 0.8
    return max(0.8, 1.6 * bounding_radius(scene))


SCAFFOLD_TEMPLATE = """\
# Engine run configuration. Values shown are the desk-scale defaults; the
# paper-faithful render resolution is 256 with stage budgets 300 + 1000.

[inputs]
scene = {scene}                # analytic-sphere | analytic-box | textured-sphere | from-files
radius = 0.5
density = 80.0
texture = rainbow              # flat | gray | checker | stripes | rainbow
ref_rho = 1.8
ref_theta_deg = 90             # front view
ref_phi_deg = 0

[field]
num_levels = 12
base_resolution = 16
max_resolution = 512
features_per_level = 2
table_size_log2 = 15
mlp_hidden = 64
mlp_layers = 2
density_bias = -3.0            # start nearly empty; -1 is the neutral default

[stage1]
iterations = 300
losses = sds3d,rec,depth,normal
resolution = 64
samples_per_ray = 96
reference_fraction = 0.25

[stage2]
iterations = 1000
losses = sds2d,opacity_reg
resolution = 64
samples_per_ray = 96
adapt_every = 1

[oracle]
kind = synthetic               # synthetic | remote (set url or DNF_ORACLE_URL)
schedule_profile = linear-beta
num_steps = 1000
weight_mode = sigma_sq         # sigma_sq | one | sigma_alpha
stage1_texture = gray          # texture used for geometry-stage targets; 'scene' keeps the scene texture

[output]
dir = {out_dir}
seed = 0
eval_every = 100
eval_views = 12
checkpoint_every = 50
"""


def scaffold_config(path, scene: str = "textured-sphere", out_dir: str = "out") -> None:
    """Write a commented starter configuration."""
    with open(path, "w") as f:
        f.write(SCAFFOLD_TEMPLATE.format(scene=scene, out_dir=out_dir))
