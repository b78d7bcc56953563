"""Synthetic test scenes: analytic density fields with exact silhouette and
depth oracles, plus reference-view bundles derived from them.

These stand in for the prepared inputs (reference image, mask, depth) and for
ground truth during evaluation. Analytic fields expose the same ``query``
interface as the learnable field, so the renderer accepts either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as _dc_field

import torch
from torch import Tensor

from .errors import ConfigError
from .field import HashGridConfig
from .render import Camera, generate_rays, render_view

SCENE_KINDS = ("analytic-sphere", "analytic-box", "textured-sphere", "from-files")
TEXTURES = ("flat", "gray", "checker", "stripes", "rainbow")


@dataclass
class SceneSpec:
    """Recipe for a synthetic scene or a set of prepared input files.

    ``kind`` selects analytic geometry (sphere or box, with a texture id) or
    ``from-files``, which requires image, mask, and depth paths of equal
    resolution.
    """

    kind: str = "textured-sphere"
    radius: float = 0.5
    half_extent: float = 0.4
    density: float = 80.0
    texture: str = "rainbow"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_path: str | None = None
    mask_path: str | None = None
    depth_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.kind != "from-files":
            if self.texture not in TEXTURES:
                raise ConfigError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
            if self.radius <= 0 or self.half_extent <= 0 or self.density <= 0:
                raise ConfigError("scene geometry parameters must be positive")
        else:
            missing = [
                name
                for name, p in (
                    ("image_path", self.image_path),
                    ("mask_path", self.mask_path),
                    ("depth_path", self.depth_path),
                )
                if p is None
            ]
            if missing:
                raise ConfigError(f"from-files scene missing {', '.join(missing)}")

    @property
    def has_ground_truth(self) -> bool:
        return self.kind != "from-files"


def texture_color(points: Tensor, center: Tensor, texture: str) -> Tensor:
    """Color of a texture id at 3D points, as a function of direction from center."""
    d = points - center
    n = d / torch.linalg.norm(d, dim=-1, keepdim=True).clamp(min=1e-9)
    if texture == "flat":
        return torch.tensor([0.75, 0.35, 0.25], dtype=points.dtype).expand_as(points).clone()
    if texture == "gray":
        return torch.full_like(points, 0.5)
    if texture == "rainbow":
        return 0.5 + 0.5 * n
    phi = torch.atan2(n[..., 1], n[..., 0])
    theta = torch.acos(n[..., 2].clamp(-1.0, 1.0))
    if texture == "stripes":
        s = 0.5 + 0.5 * torch.sin(4.0 * phi)
        a = torch.tensor([0.9, 0.7, 0.2], dtype=points.dtype)
        b = torch.tensor([0.2, 0.3, 0.8], dtype=points.dtype)
        return s.unsqueeze(-1) * a + (1.0 - s.unsqueeze(-1)) * b
    if texture == "checker":
        parity = (torch.floor(phi / (math.pi / 3)) + torch.floor(theta / (math.pi / 4))) % 2
        a = torch.tensor([0.9, 0.9, 0.85], dtype=points.dtype)
        b = torch.tensor([0.15, 0.25, 0.6], dtype=points.dtype)
        return parity.unsqueeze(-1) * a + (1.0 - parity.unsqueeze(-1)) * b
    raise ConfigError(f"unknown texture {texture!r}")


class AnalyticField:
    """Closed-form density/color field with the learnable field's query interface."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self.config = HashGridConfig()  # bounding box only; no learnable grid

    def query(self, points: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError


class SphereField(AnalyticField):
    """Constant density inside a ball, textured by direction from its center."""

    def __init__(
        self,
        radius: float = 0.5,
        density: float = 80.0,
        texture: str = "rainbow",
        center: tuple[float, float, float] = (0.0, 0.0, 0.0),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__(dtype)
        self.radius = radius
        self.density = density
        self.texture = texture
        self.center = torch.tensor(center, dtype=dtype)

    def query(self, points: Tensor) -> tuple[Tensor, Tensor]:
        p = points.to(self.dtype)
        inside = torch.linalg.norm(p - self.center, dim=-1) < self.radius
        tau = self.density * inside.to(self.dtype)
        color = texture_color(p, self.center, self.texture)
        return tau, color


class BoxField(AnalyticField):
    """Constant density inside an axis-aligned cube."""

    def __init__(
        self,
        half_extent: float = 0.4,
        density: float = 80.0,
        texture: str = "flat",
        center: tuple[float, float, float] = (0.0, 0.0, 0.0),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__(dtype)
        self.half_extent = half_extent
        self.density = density
        self.texture = texture
        self.center = torch.tensor(center, dtype=dtype)

    def query(self, points: Tensor) -> tuple[Tensor, Tensor]:
        p = points.to(self.dtype)
        inside = ((p - self.center).abs() <= self.half_extent).all(dim=-1)
        tau = self.density * inside.to(self.dtype)
        color = texture_color(p, self.center, self.texture)
        return tau, color


class UnionField(AnalyticField):
    """Pointwise union of several fields: densities add, colors density-average."""

    def __init__(self, parts: list[AnalyticField], dtype: torch.dtype = torch.float32):
        super().__init__(dtype)
        self.parts = parts

    def query(self, points: Tensor) -> tuple[Tensor, Tensor]:
        taus, colors = zip(*(part.query(points) for part in self.parts))
        tau = torch.stack(taus).sum(0)
        weighted = torch.stack([t.unsqueeze(-1) * c for t, c in zip(taus, colors)]).sum(0)
        color = weighted / tau.unsqueeze(-1).clamp(min=1e-9)
        return tau, torch.where(tau.unsqueeze(-1) > 0, color, torch.full_like(color, 0.5))


def scene_field(spec: SceneSpec, texture: str | None = None) -> AnalyticField:
    """Ground-truth field for an analytic scene, optionally with a texture override."""
    if not spec.has_ground_truth:
        raise ConfigError("from-files scenes have no analytic ground truth field")
    tex = texture if texture is not None else spec.texture
    if spec.kind == "analytic-box":
        return BoxField(spec.half_extent, spec.density, tex, spec.center)
    return SphereField(spec.radius, spec.density, tex, spec.center)


def bounding_radius(spec: SceneSpec) -> float:
    c = max(abs(v) for v in spec.center)
    if spec.kind == "analytic-box":
        return c + spec.half_extent * math.sqrt(3.0)
    return c + spec.radius


def render_target(
    field: AnalyticField, camera: Camera, samples_per_ray: int = 192,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
):
    """Deterministic (midpoint-sampled) render of a ground-truth field."""
    return render_view(
        field, camera, samples_per_ray, generator=None,
        background=background, jitter=False,
    )


def sphere_silhouette(camera: Camera, radius: float, center=(0.0, 0.0, 0.0)) -> Tensor:
    """Exact projected-disk mask of a sphere, (H, W) float in {0,1}."""
    origins, dirs = generate_rays(camera, dtype=torch.float64)
    c = torch.tensor(center, dtype=torch.float64)
    oc = c - origins
    t_mid = (dirs * oc).sum(-1)
    closest_sq = (oc * oc).sum(-1) - t_mid**2
    hit = (closest_sq < radius**2) & (t_mid > 0)
    return hit.to(torch.float32)


def sphere_first_hit_depth(
    camera: Camera, radius: float, center=(0.0, 0.0, 0.0), miss_value: float | None = None
) -> Tensor:
    """Exact first-intersection ray parameter for a sphere; misses get ``miss_value`` (default far)."""
    origins, dirs = generate_rays(camera, dtype=torch.float64)
    c = torch.tensor(center, dtype=torch.float64)
    oc = c - origins
    t_mid = (dirs * oc).sum(-1)
    disc = radius**2 - ((oc * oc).sum(-1) - t_mid**2)
    t_hit = t_mid - torch.sqrt(disc.clamp(min=0.0))
    miss = miss_value if miss_value is not None else camera.far
    depth = torch.where((disc > 0) & (t_hit > 0), t_hit, torch.full_like(t_hit, miss))
    return depth.to(torch.float32)


def box_silhouette(camera: Camera, half_extent: float, center=(0.0, 0.0, 0.0)) -> Tensor:
    """Exact slab-test mask of an axis-aligned cube, (H, W) float in {0,1}."""
    origins, dirs = generate_rays(camera, dtype=torch.float64)
    c = torch.tensor(center, dtype=torch.float64)
    lo = c - half_extent
    hi = c + half_extent
    inv = 1.0 / torch.where(dirs.abs() > 1e-12, dirs, torch.full_like(dirs, 1e-12))
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = torch.minimum(t0, t1).amax(-1)
    t_far = torch.maximum(t0, t1).amin(-1)
    hit = (t_near <= t_far) & (t_far > 0)
    return hit.to(torch.float32)


def exact_silhouette(spec: SceneSpec, camera: Camera) -> Tensor:
    if spec.kind == "analytic-box":
        return box_silhouette(camera, spec.half_extent, spec.center)
    return sphere_silhouette(camera, spec.radius, spec.center)


def make_reference_bundle(spec: SceneSpec, camera: Camera, samples_per_ray: int = 192):
    """Reference supervision (image, mask, depth) for an analytic scene.

    The image comes from a deterministic ground-truth render, the mask from
    the exact silhouette, and the depth from the ground-truth render's
    expected depth. Import stays local to dodge a cycle with the loss module.
    """
    from .losses import ReferenceBundle

    field = scene_field(spec)
    out = render_target(field, camera, samples_per_ray)
    mask = exact_silhouette(spec, camera)
    return ReferenceBundle(
        image=out.color.detach(),
        mask=mask,
        depth=out.depth.detach(),
        camera=camera,
    )


def fit_field_to_scene(
    field,
    target: AnalyticField,
    iterations: int = 300,
    points_per_iter: int = 4096,
    generator: torch.Generator | None = None,
    lr: float = 1e-2,
    bounds: tuple[float, float] = (-1.0, 1.0),
) -> float:
    """Regress a learnable field's density and color onto an analytic field.

    Used to seed optimization experiments with a known starting shape. Returns
    the final regression loss.
    """
    opt = torch.optim.Adam(field.parameters(), lr=lr)
    lo, span = bounds[0], bounds[1] - bounds[0]
    last = math.inf
    for _ in range(iterations):
        pts = lo + span * torch.rand(points_per_iter, 3, generator=generator, dtype=field.dtype)
        tau_t, col_t = target.query(pts)
        tau, col = field.query(pts)
        # Clamped density keeps the regression target finite-scaled.
        loss = ((tau - tau_t.clamp(max=200.0)) ** 2).mean() / 100.0 + ((col - col_t) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    return last
