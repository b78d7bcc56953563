"""Non-distillation objectives: masked reconstruction, depth correlation,
normal smoothness, and connected-component opacity regularization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import Tensor

from .render import Camera, RenderOutput

# 4-connectivity: components join across edges, not corners.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int64)


@dataclass
class ReferenceBundle:
    """Reference-view supervision: image, binary foreground mask, relative depth."""

    image: Tensor  # (H, W, 3) in [0, 1]
    mask: Tensor  # (H, W) in {0, 1}
    depth: Tensor  # (H, W)
    camera: Camera

    def __post_init__(self) -> None:
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise ValueError("reference image and mask resolutions differ")
        if self.depth.shape != (h, w):
            raise ValueError("reference depth and mask resolutions differ")
        binary = (self.mask == 0) | (self.mask == 1)
        if not bool(binary.all()):
            raise ValueError("reference mask must be binary")
        if not bool((self.mask > 0).any()):
            raise ValueError("reference mask has no foreground pixels")


@dataclass
class LossWeights:
    """Nonnegative multipliers for every objective."""

    lambda_rgb: float = 5.0
    lambda_mask: float = 1.0
    lambda_depth: float = 0.5
    lambda_normal: float = 0.1
    lambda_reg: float = 0.1
    lambda_sds: float = 1.0

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def reconstruction_loss(render: RenderOutput, ref: ReferenceBundle, weights: LossWeights) -> Tensor:
    """Masked RGB MSE plus opacity-vs-mask MSE, each averaged over pixels.

    The RGB term sums over channels before the pixel mean, so background
    pixels (mask 0) contribute nothing to it.
    """
    h, w = ref.mask.shape
    if render.color.shape != (h, w, 3):
        raise ValueError(
            f"render resolution {tuple(render.color.shape[:2])} != reference resolution {(h, w)}"
        )
    mask = ref.mask.to(render.color.dtype)
    rgb_term = ((mask.unsqueeze(-1) * (ref.image - render.color)) ** 2).sum(-1).mean()
    mask_term = ((mask - render.opacity) ** 2).mean()
    return weights.lambda_rgb * rgb_term + weights.lambda_mask * mask_term


def depth_pearson_loss(depth: Tensor, ref: ReferenceBundle) -> Tensor:
    """½(1 − Pearson correlation) between rendered and reference depth on the mask.

    Invariant under positive affine rescaling of either depth, so relative
    reference depth is enough. Degenerate inputs (under two foreground pixels,
    or zero variance on either side) give the uninformative constant 0.5.
    """
    fg = ref.mask > 0.5
    a = ref.depth[fg].to(depth.dtype)
    b = depth[fg]
    if a.numel() < 2:
        return torch.tensor(0.5, dtype=depth.dtype)
    # degeneracy check in f64 so a constant f32 input registers as zero variance
    var_a = float(a.detach().double().var(correction=0))
    var_b = float(b.detach().double().var(correction=0))
    if var_a < 1e-24 or var_b < 1e-24:
        return torch.tensor(0.5, dtype=depth.dtype)
    a_c = a - a.mean()
    b_c = b - b.mean()
    std_a = torch.sqrt((a_c**2).mean())
    std_b = torch.sqrt((b_c**2).mean())
    corr = ((a_c * b_c).mean() / (std_a * std_b)).clamp(-1.0, 1.0)
    return 0.5 * (1.0 - corr)


def gaussian_kernel_2d(size: int = 9, sigma: float = 1.5, dtype: torch.dtype = torch.float32) -> Tensor:
    """Normalized (size, size) Gaussian kernel."""
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _blur_replicate(maps: Tensor, size: int, sigma: float) -> Tensor:
    """(H, W, C) Gaussian blur with replicate edge handling, any image size."""
    h, w, c = maps.shape
    pad = size // 2
    rows = torch.arange(-pad, h + pad).clamp(0, h - 1)
    cols = torch.arange(-pad, w + pad).clamp(0, w - 1)
    padded = maps[rows][:, cols]
    x = padded.permute(2, 0, 1).unsqueeze(0)
    kernel = gaussian_kernel_2d(size, sigma, maps.dtype).expand(c, 1, size, size)
    out = F.conv2d(x, kernel, groups=c)
    return out.squeeze(0).permute(1, 2, 0)


def normal_smoothness_loss(normals: Tensor, kernel_size: int = 9, sigma: float = 1.5) -> Tensor:
    """Mean distance between normals and a stopgrad Gaussian blur of the map.

    Zero-vector pixels (no normal estimate) are excluded from the mean; the
    blurred branch receives no gradient, so the penalty pulls raw normals
    toward their local average.
    """
    valid = torch.linalg.norm(normals, dim=-1) > 1e-12
    count = int(valid.sum())
    if count == 0:
        return torch.zeros((), dtype=normals.dtype)
    blurred = _blur_replicate(normals, kernel_size, sigma).detach()
    residual = torch.sqrt(((normals - blurred) ** 2).sum(-1) + 1e-12)
    return (residual * valid.to(normals.dtype)).sum() / count


def label_components(binary: Tensor) -> tuple[Tensor, int | None]:
    """4-connected component labeling of a binary map.

    Returns integer labels (0 = background) and the id of the component with
    the most pixels, ties broken by the smallest id; None when the map is all
    zero.
    """
    arr = binary.detach().cpu().numpy().astype(np.int64)
    if not ((arr == 0) | (arr == 1)).all():
        raise ValueError("label_components expects a binary map")
    labels, count = ndimage.label(arr, structure=_CROSS)
    if count == 0:
        return torch.from_numpy(labels).long(), None
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return torch.from_numpy(labels).long(), int(sizes.argmax())


def opacity_regularization(render: RenderOutput, threshold: float = 0.5) -> Tensor:
    """Squared-weight mass outside the largest opaque blob, per pixel.

    Opacity is binarized at the threshold (detached), the largest 4-connected
    component is kept, and every other pixel contributes its summed squared
    compositing weights. Labeling is fixed during backward, so gradients reach
    only the penalized pixels' weights.
    """
    binary = render.opacity.detach() > threshold
    labels, largest = label_components(binary)
    if largest is None:
        outside = torch.ones_like(labels, dtype=torch.bool)
    else:
        outside = labels != largest
    h, w = binary.shape
    per_pixel = (render.weights**2).sum(-1)
    return (per_pixel * outside.to(per_pixel.dtype)).sum() / (h * w)
