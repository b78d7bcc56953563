"""Learnable 3D representation: multi-resolution hash-grid encoding feeding a small MLP.

The grid stores per-level feature tables indexed by a spatial hash of integer
cell corners; a queried point gets the trilinear blend of its 8 corner features
at every level, concatenated and decoded by the MLP into (density, color).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as _dc_field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

# Per-axis hash primes; the identity on x keeps axis-aligned structure cheap to probe.
_PRIMES = (1, 2654435761, 805459861)

# Corner offsets of a unit cell, binary order (z fastest).
_CORNERS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long
)


@dataclass
class HashGridConfig:
    """Geometry of the multi-resolution hash grid.

    Per-level resolutions grow geometrically from ``base_resolution`` to
    ``max_resolution``. Each level owns ``2**table_size_log2`` feature rows;
    hash collisions are accepted and left to the optimizer.
    """

    num_levels: int = 16
    base_resolution: int = 16
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size_log2: int = 19
    bounding_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.0, -1.0, -1.0),
        (1.0, 1.0, 1.0),
    )

    def __post_init__(self) -> None:
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.base_resolution > self.max_resolution:
            raise ValueError("base_resolution must be <= max_resolution")
        if self.table_size_log2 < 4:
            raise ValueError("table_size_log2 must be >= 4 (16 entries per level)")
        lo, hi = self.bounding_box
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("bounding_box must have positive extent on every axis")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def feature_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def level_resolutions(self) -> list[int]:
        """Per-level cell counts per axis, geometric from base to max."""
        if self.num_levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.num_levels - 1)
        )
        return [
            max(1, int(math.floor(self.base_resolution * growth**level + 0.5)))
            for level in range(self.num_levels)
        ]

    def to_dict(self) -> dict:
        return {
            "num_levels": self.num_levels,
            "base_resolution": self.base_resolution,
            "max_resolution": self.max_resolution,
            "features_per_level": self.features_per_level,
            "table_size_log2": self.table_size_log2,
            "bounding_box": [list(self.bounding_box[0]), list(self.bounding_box[1])],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        lo, hi = d["bounding_box"]
        return cls(
            num_levels=int(d["num_levels"]),
            base_resolution=int(d["base_resolution"]),
            max_resolution=int(d["max_resolution"]),
            features_per_level=int(d["features_per_level"]),
            table_size_log2=int(d["table_size_log2"]),
            bounding_box=(tuple(float(v) for v in lo), tuple(float(v) for v in hi)),
        )


def hash_corners(corners: Tensor, table_size_log2: int) -> Tensor:
    """Hash integer corner coordinates into table indices.

    Args:
        corners: (..., 3) long tensor of nonnegative cell-corner coordinates.
        table_size_log2: log2 of the per-level table size.

    Returns:
        (...,) long tensor of indices in [0, 2**table_size_log2).
    """
    h = corners[..., 0] * _PRIMES[0]
    h = h ^ (corners[..., 1] * _PRIMES[1])
    h = h ^ (corners[..., 2] * _PRIMES[2])
    return h & ((1 << table_size_log2) - 1)


def encode_position(points: Tensor, config: HashGridConfig, grid_params: Tensor) -> Tensor:
    """Multi-resolution hashed trilinear encoding of 3D points.

    Points are normalized by the bounding box (clamped to its surface when
    outside) and, per level, blended trilinearly from the 8 hashed corner
    features of their cell. Differentiable in both ``grid_params`` and
    ``points``.

    Args:
        points: (N, 3) positions in scene units.
        config: grid geometry.
        grid_params: (num_levels, table_size, features_per_level) feature tables.

    Returns:
        (N, num_levels * features_per_level) feature vectors.
    """
    dtype = grid_params.dtype
    lo = torch.tensor(config.bounding_box[0], dtype=dtype)
    hi = torch.tensor(config.bounding_box[1], dtype=dtype)
    x01 = ((points.to(dtype) - lo) / (hi - lo)).clamp(0.0, 1.0)

    corners = _CORNERS  # (8, 3)
    feats = []
    for level, res in enumerate(config.level_resolutions()):
        scaled = x01 * res
        base = torch.floor(scaled.detach()).long()  # (N, 3)
        frac = scaled - base.to(dtype)
        idx = hash_corners(base.unsqueeze(1) + corners, config.table_size_log2)  # (N, 8)
        corner_feats = grid_params[level][idx]  # (N, 8, F)
        # Trilinear weight of each corner: product over axes of frac / (1 - frac).
        c = corners.to(dtype)
        w = (c * frac.unsqueeze(1) + (1.0 - c) * (1.0 - frac.unsqueeze(1))).prod(-1)
        feats.append((corner_feats * w.unsqueeze(-1)).sum(1))
    return torch.cat(feats, dim=-1)


class RadianceField(nn.Module):
    """Hash-grid radiance field mapping 3D points to (density, RGB color).

    Density goes through softplus with an additive bias (negative by default
    so fresh fields are nearly empty); color through a sigmoid. Queries
    outside the bounding box return zero density. Color depends on position
    only; there is no view conditioning.
    """

    def __init__(
        self,
        config: HashGridConfig,
        mlp_hidden: int = 64,
        mlp_layers: int = 2,
        density_bias: float = -1.0,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.config = config
        self.mlp_hidden = mlp_hidden
        self.mlp_layers = mlp_layers
        self.density_bias = density_bias

        grid = torch.empty(
            config.num_levels, config.table_size, config.features_per_level, dtype=dtype
        )
        grid.uniform_(-1e-4, 1e-4, generator=generator)
        self.grid = nn.Parameter(grid)

        sizes = [config.feature_dim] + [mlp_hidden] * mlp_layers + [4]
        layers: list[nn.Module] = []
        for i in range(len(sizes) - 1):
            linear = nn.Linear(sizes[i], sizes[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(sizes[i])
            with torch.no_grad():
                linear.weight.uniform_(-bound, bound, generator=generator)
                linear.bias.uniform_(-bound, bound, generator=generator)
            layers.append(linear)
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)

    @property
    def dtype(self) -> torch.dtype:
        return self.grid.dtype

    def grid_parameters(self) -> list[nn.Parameter]:
        return [self.grid]

    def mlp_parameters(self) -> list[nn.Parameter]:
        return list(self.mlp.parameters())

    def options_dict(self) -> dict:
        """Constructor options echoed into checkpoints."""
        d = self.config.to_dict()
        d.update(
            mlp_hidden=self.mlp_hidden,
            mlp_layers=self.mlp_layers,
            density_bias=self.density_bias,
        )
        return d

    @classmethod
    def from_options(cls, d: dict, dtype: torch.dtype = torch.float32) -> "RadianceField":
        return cls(
            HashGridConfig.from_dict(d),
            mlp_hidden=int(d["mlp_hidden"]),
            mlp_layers=int(d["mlp_layers"]),
            density_bias=float(d["density_bias"]),
            dtype=dtype,
        )

    def query(self, points: Tensor) -> tuple[Tensor, Tensor]:
        """Evaluate the field at a batch of points.

        Args:
            points: (N, 3) positions in scene units.

        Returns:
            density: (N,) nonnegative; exactly zero outside the bounding box.
            color: (N, 3) RGB in [0, 1].
        """
        feats = encode_position(points, self.config, self.grid)
        raw = self.mlp(feats)
        density = F.softplus(raw[:, 0] + self.density_bias)
        color = torch.sigmoid(raw[:, 1:4])

        lo = torch.tensor(self.config.bounding_box[0], dtype=points.dtype)
        hi = torch.tensor(self.config.bounding_box[1], dtype=points.dtype)
        inside = ((points >= lo) & (points <= hi)).all(dim=-1)
        density = density * inside.to(density.dtype)
        return density, color
