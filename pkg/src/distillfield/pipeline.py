"""Two-stage optimization: a geometry stage mixing view-conditioned
distillation with reference supervision, then a texture stage mixing
text-conditioned distillation with opacity regularization and alternating
oracle adaptation. Also houses run metrics, held-out evaluation, and mesh
extraction.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as _dc_field
from pathlib import Path

import numpy as np
import torch
from skimage import measure
from torch import Tensor

from .diffusion import (
    CAP_ADAPT,
    CAP_TEXT,
    CAP_VIEW,
    Conditioning,
    NoiseSchedule,
    adapt_oracle,
    forward_diffuse,
    sample_timestep,
    sds_grad,
    sds_loss_through,
)
from .errors import NumericalFailure, OracleError
from .field import RadianceField
from .losses import (
    LossWeights,
    ReferenceBundle,
    depth_pearson_loss,
    normal_smoothness_loss,
    opacity_regularization,
    reconstruction_loss,
)
from .render import Camera, render_view
from .scenes import SceneSpec, exact_silhouette, render_target, scene_field

KNOWN_LOSSES = ("sds3d", "sds2d", "rec", "depth", "normal", "opacity_reg")


@dataclass
class CameraPolicy:
    """Spherical camera sampling ranges plus the reference viewpoint."""

    reference_camera: Camera
    reference_fraction: float = 0.25
    rho_range: tuple[float, float] = (1.5, 2.2)
    theta_range: tuple[float, float] = (math.radians(60.0), math.radians(120.0))
    phi_range: tuple[float, float] = (0.0, 2.0 * math.pi)
    fov_y: float = 0.8
    width: int = 64
    height: int = 64
    near_far_margin: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.reference_fraction <= 1.0:
            raise ValueError("reference_fraction must lie in [0, 1]")
        for name, (lo, hi) in (
            ("rho_range", self.rho_range),
            ("theta_range", self.theta_range),
            ("phi_range", self.phi_range),
        ):
            if lo > hi:
                raise ValueError(f"{name} must be ordered (lo <= hi)")


@dataclass
class StagePlan:
    """Budget, losses, and sampling policy for one optimization stage."""

    iterations: int
    enabled_losses: frozenset[str]
    loss_weights: LossWeights
    camera_policy: CameraPolicy
    render_resolution: int = 64
    samples_per_ray: int = 96
    adapt_every: int = 1
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    opacity_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.render_resolution < 16:
            raise ValueError("render_resolution must be >= 16")
        unknown = set(self.enabled_losses) - set(KNOWN_LOSSES)
        if unknown:
            raise ValueError(f"unknown loss names {sorted(unknown)}; expected subset of {KNOWN_LOSSES}")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.adapt_every < 0:
            raise ValueError("adapt_every must be >= 0")


@dataclass
class RunMetrics:
    """Per-iteration loss records plus periodic evaluations and stage timings."""

    records: list = _dc_field(default_factory=list)

    def append_step(self, record: dict) -> None:
        self.records.append({"kind": "step", **record})

    def append_eval(self, record: dict) -> None:
        self.records.append({"kind": "eval", **record})

    def append_stage_time(self, stage: int, seconds: float) -> None:
        self.records.append({"kind": "stage_time", "stage": stage, "seconds": seconds})

    def steps(self, stage: int | None = None) -> list:
        out = [r for r in self.records if r["kind"] == "step"]
        if stage is not None:
            out = [r for r in out if r["stage"] == stage]
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record) + "\n")


def sample_camera(policy: CameraPolicy, generator: torch.Generator | None = None) -> Camera:
    """Draw a camera: the reference view with the reference-only probability,
    otherwise uniform (ρ, ϑ, φ) within the policy ranges.

    Reference draws return the policy's reference Camera object itself, so
    identity comparison tells callers which branch fired.
    """
    u_ref = float(torch.rand((), dtype=torch.float64, generator=generator))
    if u_ref < policy.reference_fraction:
        return policy.reference_camera
    draws = torch.rand(3, dtype=torch.float64, generator=generator)
    rho = policy.rho_range[0] + float(draws[0]) * (policy.rho_range[1] - policy.rho_range[0])
    theta = policy.theta_range[0] + float(draws[1]) * (policy.theta_range[1] - policy.theta_range[0])
    phi = policy.phi_range[0] + float(draws[2]) * (policy.phi_range[1] - policy.phi_range[0])
    near = max(rho - policy.near_far_margin, 0.05)
    return Camera(
        rho=rho, theta=theta, phi=phi, fov_y=policy.fov_y,
        width=policy.width, height=policy.height,
        near=near, far=rho + policy.near_far_margin,
    )


def make_optimizer(field: RadianceField, plan: StagePlan) -> torch.optim.Adam:
    """Adam with separate learning rates for grid and MLP parameters."""
    return torch.optim.Adam(
        [
            {"params": field.grid_parameters(), "lr": plan.lr_grid},
            {"params": field.mlp_parameters(), "lr": plan.lr_mlp},
        ],
        betas=plan.betas,
    )


def _check_finite(value: Tensor, stage: int, iteration: int) -> None:
    if not bool(torch.isfinite(value.detach()).all()):
        raise NumericalFailure(f"non-finite loss at stage {stage} iteration {iteration}")


def stage1_step(
    field: RadianceField,
    ref: ReferenceBundle,
    oracle3d,
    schedule: NoiseSchedule,
    plan: StagePlan,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    iteration: int,
) -> dict:
    """One geometry-stage update: view-conditioned distillation everywhere,
    reconstruction/depth/normal terms only on reference-camera draws."""
    if "sds3d" in plan.enabled_losses and not oracle3d.supports(CAP_VIEW):
        raise OracleError("stage 1 needs a view-conditioned oracle")
    cam = sample_camera(plan.camera_policy, generator)
    is_ref = cam is ref.camera
    render = render_view(
        field, cam, plan.samples_per_ray, generator=generator, background=plan.background
    )
    weights = plan.loss_weights
    values: dict[str, float] = {}
    total = torch.zeros((), dtype=render.color.dtype)

    if "sds3d" in plan.enabled_losses:
        t = sample_timestep(schedule, generator)
        eps = torch.randn(render.color.shape, generator=generator, dtype=render.color.dtype)
        with torch.no_grad():
            x_t = forward_diffuse(render.color.detach(), t, eps, schedule)
            eps_pred = oracle3d.predict_eps(x_t, t, Conditioning(camera=cam))
        g = sds_grad(render.color.detach(), t, eps, eps_pred, schedule)
        total = total + weights.lambda_sds * sds_loss_through(render.color, g)
        _, _, w_t = schedule.coefficients(t)
        values["sds3d"] = w_t * float(((eps_pred - eps) ** 2).mean())

    if "rec" in plan.enabled_losses:
        values["rec"] = 0.0
        if is_ref:
            term = reconstruction_loss(render, ref, weights)
            total = total + term
            values["rec"] = float(term.detach())
    if "depth" in plan.enabled_losses:
        values["depth"] = 0.0
        if is_ref:
            term = weights.lambda_depth * depth_pearson_loss(render.depth, ref)
            total = total + term
            values["depth"] = float(term.detach())
    if "normal" in plan.enabled_losses:
        values["normal"] = 0.0
        if is_ref:
            term = weights.lambda_normal * normal_smoothness_loss(render.normals)
            total = total + term
            values["normal"] = float(term.detach())

    _check_finite(total, 1, iteration)
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    optimizer.step()
    return {
        "stage": 1,
        "iteration": iteration,
        "reference_view": is_ref,
        "losses": values,
        "total": float(total.detach()),
    }


def stage2_step(
    field: RadianceField,
    oracle2d,
    schedule: NoiseSchedule,
    plan: StagePlan,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    iteration: int,
    ref: ReferenceBundle | None = None,
    prompt: str | None = None,
) -> dict:
    """One texture-stage update: distillation in the oracle's working space
    plus opacity regularization, with periodic adapter updates afterwards."""
    if "sds2d" in plan.enabled_losses and not oracle2d.supports(CAP_TEXT):
        raise OracleError("stage 2 needs a text-conditioned oracle")
    cam = sample_camera(plan.camera_policy, generator)
    is_ref = ref is not None and cam is ref.camera
    render = render_view(
        field, cam, plan.samples_per_ray, generator=generator, background=plan.background
    )
    weights = plan.loss_weights
    values: dict[str, float] = {}
    total = torch.zeros((), dtype=render.color.dtype)
    cond = Conditioning(camera=cam, prompt=prompt)

    if "sds2d" in plan.enabled_losses:
        x0 = render.color
        encoded = oracle2d.encode(x0)
        if encoded.shape != x0.shape:
            raise OracleError(
                "stage-2 distillation needs a codec that preserves the render shape; "
                f"got latent shape {tuple(encoded.shape)} for render {tuple(x0.shape)}"
            )
        # Straight-through codec: forward value from the oracle, identity gradient.
        z0 = x0 + (encoded - x0).detach()
        t = sample_timestep(schedule, generator)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        with torch.no_grad():
            z_t = forward_diffuse(z0.detach(), t, eps, schedule)
            eps_pred = oracle2d.predict_eps(z_t, t, cond)
        g = sds_grad(z0.detach(), t, eps, eps_pred, schedule)
        total = total + weights.lambda_sds * sds_loss_through(z0, g)
        _, _, w_t = schedule.coefficients(t)
        values["sds2d"] = w_t * float(((eps_pred - eps) ** 2).mean())

    if "opacity_reg" in plan.enabled_losses:
        term = weights.lambda_reg * opacity_regularization(render, plan.opacity_threshold)
        total = total + term
        values["opacity_reg"] = float(term.detach())

    if "rec" in plan.enabled_losses and ref is not None:
        values["rec"] = 0.0
        if is_ref:
            term = reconstruction_loss(render, ref, weights)
            total = total + term
            values["rec"] = float(term.detach())
    if "depth" in plan.enabled_losses and ref is not None:
        values["depth"] = 0.0
        if is_ref:
            term = weights.lambda_depth * depth_pearson_loss(render.depth, ref)
            total = total + term
            values["depth"] = float(term.detach())
    if "normal" in plan.enabled_losses and ref is not None:
        values["normal"] = 0.0
        if is_ref:
            term = weights.lambda_normal * normal_smoothness_loss(render.normals)
            total = total + term
            values["normal"] = float(term.detach())

    _check_finite(total, 2, iteration)
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    optimizer.step()

    record = {
        "stage": 2,
        "iteration": iteration,
        "reference_view": is_ref,
        "losses": values,
        "total": float(total.detach()),
    }
    if (
        plan.adapt_every > 0
        and (iteration + 1) % plan.adapt_every == 0
        and oracle2d.supports(CAP_ADAPT)
    ):
        record["adapt_loss"] = adapt_oracle(
            oracle2d, [render.color.detach()], [cond], schedule, generator
        )
    return record


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mask_iou(a: Tensor, b: Tensor) -> float:
    """Intersection over union of two boolean masks; empty union counts as 1."""
    a = a.bool()
    b = b.bool()
    union = float((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum()) / union


def evaluation_ring(
    reference: Camera, n_views: int = 12, resolution: int | None = None, offset: float = 0.125
) -> list[Camera]:
    """Held-out cameras equally spaced in azimuth at the reference ϑ and ρ.

    The fractional azimuth offset keeps the ring off the reference view and
    off any trained orbit multiple.
    """
    width = resolution or reference.width
    height = resolution or reference.height
    cams = []
    for k in range(n_views):
        phi = reference.phi + 2.0 * math.pi * (k + offset) / n_views
        cams.append(
            Camera(
                rho=reference.rho, theta=reference.theta, phi=phi % (2.0 * math.pi),
                fov_y=reference.fov_y, width=width, height=height,
                near=reference.near, far=reference.far,
            )
        )
    return cams


def evaluate_field(
    field,
    scene: SceneSpec,
    cameras: list[Camera],
    samples_per_ray: int = 128,
    target_samples_per_ray: int = 192,
    mesh_resolution: int = 0,
) -> dict:
    """Held-out comparison against a scene's analytic ground truth.

    Reports mean PSNR, mask IoU, masked depth Pearson correlation and, when
    ``mesh_resolution`` > 0, the largest vertex-to-surface distance of the
    extracted mesh.
    """
    gt = scene_field(scene)
    psnrs, ious, corrs = [], [], []
    for cam in cameras:
        with torch.no_grad():
            out = render_view(field, cam, samples_per_ray, jitter=False)
        target = render_target(gt, cam, target_samples_per_ray)
        sil = exact_silhouette(scene, cam)
        psnrs.append(psnr(out.color, target.color))
        ious.append(mask_iou(out.opacity > 0.5, sil > 0.5))
        fg = sil > 0.5
        if int(fg.sum()) >= 2:
            corr = _pearson(target.depth[fg], out.depth[fg])
            if corr is not None:
                corrs.append(corr)
    result = {
        "psnr": sum(psnrs) / len(psnrs),
        "iou": sum(ious) / len(ious),
        "depth_corr": sum(corrs) / len(corrs) if corrs else 0.0,
    }
    if mesh_resolution:
        verts, _ = extract_mesh(field, mesh_resolution)
        result["hausdorff"] = surface_distance(scene, verts)
    return result


def _pearson(a: Tensor, b: Tensor) -> float | None:
    """Population Pearson correlation, None when either side is constant."""
    a_c = a - a.mean()
    b_c = b - b.mean()
    sa = float(torch.sqrt((a_c**2).mean()))
    sb = float(torch.sqrt((b_c**2).mean()))
    if sa < 1e-9 or sb < 1e-9:
        return None
    corr = float((a_c * b_c).mean()) / (sa * sb)
    return max(-1.0, min(1.0, corr))


def surface_distance(scene: SceneSpec, vertices: np.ndarray) -> float | None:
    """Largest vertex-to-surface distance against the scene's analytic shape."""
    if len(vertices) == 0:
        return None
    p = np.abs(vertices - np.asarray(scene.center))
    if scene.kind == "analytic-box":
        q = p - scene.half_extent
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(-1), 0.0)
        return float(np.abs(outside + inside).max())
    radii = np.linalg.norm(vertices - np.asarray(scene.center), axis=-1)
    return float(np.abs(radii - scene.radius).max())


def render_orbit(
    field,
    reference: Camera,
    n_views: int = 8,
    samples_per_ray: int = 128,
    resolution: int | None = None,
) -> list:
    """Deterministic orbit renders at the reference ϑ and ρ, equally spaced in azimuth."""
    outs = []
    for cam in evaluation_ring(reference, n_views, resolution, offset=0.0):
        with torch.no_grad():
            outs.append(render_view(field, cam, samples_per_ray, jitter=False))
    return outs


def run_pipeline(config) -> tuple[Path, RunMetrics]:
    """Execute both stages from an engine configuration.

    Stage 1 optimizes geometry against the view-conditioned oracle with
    reference supervision; stage 2 optimizes texture against the
    text-conditioned oracle with opacity regularization and adapter updates.
    Writes per-stage checkpoints, a rolling last-good checkpoint, an orbit
    contact sheet per stage, and a JSONL metrics file.

    Returns the final checkpoint path and the collected metrics.
    """
    from .io import normal_visualization, save_checkpoint, save_contact_sheet

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(config.seed)

    field = RadianceField(
        config.grid,
        mlp_hidden=config.mlp_hidden,
        mlp_layers=config.mlp_layers,
        density_bias=config.density_bias,
        generator=generator,
    )
    schedule = config.build_schedule()
    ref = config.build_reference_bundle()
    oracle3d, oracle2d = config.build_oracles(schedule, ref.camera)

    metrics = RunMetrics()
    last_good = out_dir / "last_good.dnf1"
    save_checkpoint(last_good, field, {"stage": 0, "iteration": 0, "seed": config.seed})

    def periodic(stage: int, plan: StagePlan, iteration: int) -> None:
        done = iteration + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(last_good, field, {"stage": stage, "iteration": done, "seed": config.seed})
        if (
            config.eval_every
            and done % config.eval_every == 0
            and config.scene.has_ground_truth
        ):
            ring = evaluation_ring(ref.camera, config.eval_views, plan.render_resolution)
            ev = evaluate_field(field, config.scene, ring, plan.samples_per_ray,
                                config.target_samples_per_ray)
            metrics.append_eval({"stage": stage, "iteration": done, **ev})

    def orbit_sheet(stage: int, plan: StagePlan) -> None:
        outs = render_orbit(field, ref.camera, config.orbit_views, plan.samples_per_ray,
                            plan.render_resolution)
        tiles = [o.color for o in outs] + [normal_visualization(o.normals) for o in outs]
        save_contact_sheet(out_dir / f"stage{stage}_orbit.png", tiles, cols=config.orbit_views)

    plan1, plan2 = config.stage1, config.stage2
    t0 = time.monotonic()
    optimizer = make_optimizer(field, plan1)
    for i in range(plan1.iterations):
        metrics.append_step(stage1_step(field, ref, oracle3d, schedule, plan1, optimizer, generator, i))
        periodic(1, plan1, i)
    metrics.append_stage_time(1, time.monotonic() - t0)
    stage1_path = out_dir / "stage1.dnf1"
    save_checkpoint(stage1_path, field, {"stage": 1, "iteration": plan1.iterations, "seed": config.seed})
    orbit_sheet(1, plan1)

    t1 = time.monotonic()
    optimizer = make_optimizer(field, plan2)
    stage2_ref = ref if plan2.enabled_losses & {"rec", "depth", "normal"} else None
    for i in range(plan2.iterations):
        metrics.append_step(
            stage2_step(field, oracle2d, schedule, plan2, optimizer, generator, i,
                        ref=stage2_ref, prompt=config.prompt)
        )
        periodic(2, plan2, i)
    metrics.append_stage_time(2, time.monotonic() - t1)
    final_path = out_dir / "stage2.dnf1"
    save_checkpoint(final_path, field, {"stage": 2, "iteration": plan2.iterations, "seed": config.seed})
    orbit_sheet(2, plan2)

    metrics.write_jsonl(out_dir / "metrics.jsonl")
    return final_path, metrics


def extract_mesh(
    field, grid_resolution: int = 96, iso_level: float | None = None, chunk: int = 65536
) -> tuple[np.ndarray, np.ndarray]:
    """Marching-cubes surface of the density field over its bounding box.

    The default iso level is the density whose alpha reaches 0.5 at a spacing
    of 1/128th of the largest box extent. Returns (vertices, faces); both
    empty when the level never crosses the density range.
    """
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be >= 8")
    lo, hi = field.config.bounding_box
    extent = max(h - l for l, h in zip(lo, hi))
    if iso_level is None:
        iso_level = math.log(2.0) / (extent / 128.0)

    axes = [torch.linspace(l, h, grid_resolution, dtype=torch.float32) for l, h in zip(lo, hi)]
    gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
    points = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
    densities = []
    with torch.no_grad():
        for start in range(0, points.shape[0], chunk):
            tau, _ = field.query(points[start : start + chunk].to(getattr(field, "dtype", torch.float32)))
            densities.append(tau.to(torch.float32))
    volume = torch.cat(densities).reshape(grid_resolution, grid_resolution, grid_resolution).numpy()

    if not (volume.min() < iso_level < volume.max()):
        return np.zeros((0, 3), dtype=np.float32), np.zeros((0, 3), dtype=np.int64)
    spacing = tuple((h - l) / (grid_resolution - 1) for l, h in zip(lo, hi))
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso_level, spacing=spacing)
    verts = verts + np.asarray(lo, dtype=verts.dtype)
    return verts.astype(np.float32), faces.astype(np.int64)
