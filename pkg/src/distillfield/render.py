"""Camera model, ray generation, and differentiable volume rendering.

Produces color, expected depth, opacity, per-sample weights, and a normal map
estimated from depth differences. Rendering is deterministic given an explicit
generator and independent of the ray chunk size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

_UP_Z = (0.0, 0.0, 1.0)
_UP_FALLBACK = (0.0, 1.0, 0.0)

# Guard for normalized expected depth; empty pixels are overwritten with far.
DEPTH_EPS = 1e-6


@dataclass
class Camera:
    """Pinhole camera on a sphere around the origin, looking at the origin.

    Position is spherical: radius ``rho``, polar angle ``theta`` (0 at +z),
    azimuth ``phi``. ``fov_y`` is the vertical field of view in radians.
    """

    rho: float
    theta: float
    phi: float
    fov_y: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError("camera rho must be > 0")
        if not 0 < self.theta < math.pi:
            raise ValueError("camera theta must lie strictly inside (0, pi)")
        if not 0 < self.fov_y < math.pi:
            raise ValueError("camera fov_y must lie strictly inside (0, pi)")
        if not self.near < self.far:
            raise ValueError("camera near must be < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be >= 1x1")

    def position(self) -> Tensor:
        """World-space camera position, float64."""
        st, ct = math.sin(self.theta), math.cos(self.theta)
        return torch.tensor(
            [
                self.rho * st * math.cos(self.phi),
                self.rho * st * math.sin(self.phi),
                self.rho * ct,
            ],
            dtype=torch.float64,
        )

    def basis(self) -> tuple[Tensor, Tensor, Tensor]:
        """Orthonormal (right, down, forward) in world space, float64.

        Forward points from the camera toward the origin. The camera-frame
        triad is right-handed in the order (right, down, forward).
        """
        pos = self.position()
        forward = -pos / torch.linalg.norm(pos)
        up = torch.tensor(_UP_Z, dtype=torch.float64)
        right = torch.linalg.cross(forward, up)
        if torch.linalg.norm(right) < 1e-9:
            right = torch.linalg.cross(forward, torch.tensor(_UP_FALLBACK, dtype=torch.float64))
        right = right / torch.linalg.norm(right)
        down = torch.linalg.cross(forward, right)
        return right, down, forward

    def focal(self) -> float:
        """Focal length in pixels (vertical fov over image height)."""
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    def spherical(self) -> tuple[float, float, float]:
        return (self.rho, self.theta, self.phi)


@dataclass
class RenderOutput:
    """One rendered view.

    ``depth`` is the expected ray parameter in scene units; ``weights`` holds
    the per-sample compositing weights whose per-pixel sum equals ``opacity``.
    Normals are unit vectors in camera space where opacity exceeds 0.1 and
    zero elsewhere.
    """

    color: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W)
    opacity: Tensor  # (H, W)
    weights: Tensor  # (H, W, S)
    normals: Tensor  # (H, W, 3)


def generate_rays(camera: Camera, dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor]:
    """Pinhole rays through every pixel center.

    Returns:
        origins: (H, W, 3), the camera position broadcast per pixel.
        directions: (H, W, 3) unit vectors in world space.
    """
    right, down, forward = camera.basis()
    pos = camera.position()
    focal = camera.focal()
    w, h = camera.width, camera.height

    i = torch.arange(w, dtype=torch.float64) + 0.5 - 0.5 * w
    j = torch.arange(h, dtype=torch.float64) + 0.5 - 0.5 * h
    u = (i / focal).reshape(1, w, 1)
    v = (j / focal).reshape(h, 1, 1)

    dirs = u * right + v * down + forward
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = pos.reshape(1, 1, 3).expand(h, w, 3)
    return origins.to(dtype), dirs.to(dtype)


def camera_space_directions(camera: Camera, dtype: torch.dtype = torch.float32) -> Tensor:
    """(H, W, 3) unit ray directions in the camera frame (x right, y down, z forward)."""
    focal = camera.focal()
    w, h = camera.width, camera.height
    i = torch.arange(w, dtype=torch.float64) + 0.5 - 0.5 * w
    j = torch.arange(h, dtype=torch.float64) + 0.5 - 0.5 * h
    u = (i / focal).reshape(1, w).expand(h, w)
    v = (j / focal).reshape(h, 1).expand(h, w)
    d = torch.stack([u, v, torch.ones_like(u)], dim=-1)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    return d.to(dtype)


def composite_rays(
    density: Tensor,
    color: Tensor,
    t: Tensor,
    far: float,
    background: Tensor,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Front-to-back alpha compositing of ordered ray samples.

    Args:
        density: (R, S) nonnegative extinction at each sample.
        color: (R, S, 3) emitted color at each sample.
        t: (R, S) strictly increasing ray parameters.
        far: far bound; the last sample's spacing runs out to it.
        background: (3,) color composited with the residual transmittance.

    Returns:
        rgb: (R, 3); opacity: (R,); weights: (R, S); depth: (R,) expected ray
        parameter, set to ``far`` where opacity is exactly zero. All outputs
        are differentiable w.r.t. density and color.
    """
    num_samples = t.shape[-1]
    if num_samples == 0:
        rays = t.shape[0]
        rgb = background.to(density.dtype).expand(rays, 3).clone()
        opacity = torch.zeros(rays, dtype=density.dtype)
        weights = torch.zeros(rays, 0, dtype=density.dtype)
        depth = torch.full((rays,), far, dtype=density.dtype)
        return rgb, opacity, weights, depth

    deltas = torch.cat([t[:, 1:] - t[:, :-1], far - t[:, -1:]], dim=-1)
    alpha = 1.0 - torch.exp(-density * deltas)
    ones = torch.ones_like(alpha[:, :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha], dim=-1), dim=-1)[:, :-1]
    weights = alpha * transmittance

    opacity = weights.sum(-1)
    rgb = (weights.unsqueeze(-1) * color).sum(-2)
    rgb = rgb + (1.0 - opacity).unsqueeze(-1) * background.to(rgb.dtype)
    depth = (weights * t).sum(-1) / opacity.clamp(min=DEPTH_EPS)
    depth = torch.where(opacity > 0, depth, torch.full_like(depth, far))
    return rgb, opacity, weights, depth


def sample_ray_parameters(
    num_rays: int,
    samples_per_ray: int,
    near: float,
    far: float,
    generator: torch.Generator | None = None,
    jitter: bool = True,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Stratified ray parameters in [near, far), shape (num_rays, samples_per_ray).

    With ``jitter`` off every ray takes bin midpoints, which makes the result
    a deterministic function of the bounds alone.
    """
    delta = (far - near) / samples_per_ray
    k = torch.arange(samples_per_ray, dtype=dtype)
    if jitter:
        u = torch.rand(num_rays, samples_per_ray, generator=generator, dtype=dtype)
    else:
        u = torch.full((num_rays, samples_per_ray), 0.5, dtype=dtype)
    return near + (k + u) * delta


def render_view(
    field,
    camera: Camera,
    samples_per_ray: int,
    generator: torch.Generator | None = None,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
    chunk_size: int = 4096,
    jitter: bool = True,
) -> RenderOutput:
    """Render one view of a field by stratified ray marching.

    The field is any object with ``query(points) -> (density, color)``. All
    per-ray jitters are drawn up front, so the output does not depend on
    ``chunk_size``.

    Args:
        field: density/color field to integrate.
        camera: view to render.
        samples_per_ray: at least 2 stratified samples per ray.
        generator: RNG for the stratified jitter; midpoints if ``jitter`` off.
        background: constant color behind the field.
        chunk_size: rays per field query batch.
        jitter: stratified (True) or midpoint (False) sampling.
    """
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    dtype = field.dtype if hasattr(field, "dtype") else torch.float32
    h, w = camera.height, camera.width
    origins, dirs = generate_rays(camera, dtype=dtype)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    num_rays = h * w

    t = sample_ray_parameters(
        num_rays, samples_per_ray, camera.near, camera.far,
        generator=generator, jitter=jitter, dtype=dtype,
    )
    bg = torch.tensor(background, dtype=dtype)

    rgb_chunks, opa_chunks, wgt_chunks, dep_chunks = [], [], [], []
    for start in range(0, num_rays, chunk_size):
        stop = min(start + chunk_size, num_rays)
        tc = t[start:stop]
        points = origins[start:stop, None, :] + tc[..., None] * dirs[start:stop, None, :]
        density, color = field.query(points.reshape(-1, 3))
        density = density.reshape(stop - start, samples_per_ray)
        color = color.reshape(stop - start, samples_per_ray, 3)
        rgb, opacity, weights, depth = composite_rays(density, color, tc, camera.far, bg)
        rgb_chunks.append(rgb)
        opa_chunks.append(opacity)
        wgt_chunks.append(weights)
        dep_chunks.append(depth)

    rgb = torch.cat(rgb_chunks).reshape(h, w, 3)
    opacity = torch.cat(opa_chunks).reshape(h, w)
    weights = torch.cat(wgt_chunks).reshape(h, w, samples_per_ray)
    depth = torch.cat(dep_chunks).reshape(h, w)

    # Depth along the optical axis for normal estimation; ray-parameter depth
    # is what the output reports.
    _, _, forward = camera.basis()
    cos = (dirs.to(torch.float64) @ forward).reshape(h, w).to(dtype)
    normals = estimate_normals(depth * cos, camera)
    visible = (opacity.detach() > 0.1).unsqueeze(-1)
    normals = normals * visible.to(dtype)
    return RenderOutput(color=rgb, depth=depth, opacity=opacity, weights=weights, normals=normals)


def estimate_normals(depth: Tensor, camera: Camera) -> Tensor:
    """Normals from finite differences of an optical-axis depth map.

    ``depth`` holds distance along the camera forward axis per pixel, so a
    constant map is a fronto-parallel plane. Pixels are backprojected to
    camera-space points; the normal is the normalized cross product of the
    vertical and horizontal point differences (central inside, one-sided at
    the borders), oriented toward the camera for front-facing surfaces.
    Degenerate cross products yield zero vectors.

    Args:
        depth: (H, W) finite depth values.
        camera: supplies the pinhole intrinsics.

    Returns:
        (H, W, 3) normals in the camera frame; (0, 0, -1) for a constant map.
    """
    h, w = depth.shape
    dtype = depth.dtype
    if h < 2 or w < 2:
        return torch.zeros(h, w, 3, dtype=dtype)

    focal = camera.focal()
    u = ((torch.arange(w, dtype=torch.float64) + 0.5 - 0.5 * w) / focal).to(dtype)
    v = ((torch.arange(h, dtype=torch.float64) + 0.5 - 0.5 * h) / focal).to(dtype)
    points = torch.stack(
        [
            u.reshape(1, w).expand(h, w) * depth,
            v.reshape(h, 1).expand(h, w) * depth,
            depth,
        ],
        dim=-1,
    )

    horiz = torch.empty_like(points)
    horiz[:, 1:-1] = points[:, 2:] - points[:, :-2]
    horiz[:, 0] = points[:, 1] - points[:, 0]
    horiz[:, -1] = points[:, -1] - points[:, -2]

    vert = torch.empty_like(points)
    vert[1:-1, :] = points[2:, :] - points[:-2, :]
    vert[0, :] = points[1, :] - points[0, :]
    vert[-1, :] = points[-1, :] - points[-2, :]

    n = torch.linalg.cross(vert, horiz)
    norm = torch.linalg.norm(n, dim=-1, keepdim=True)
    return torch.where(norm > 1e-12, n / norm.clamp(min=1e-12), torch.zeros_like(n))
