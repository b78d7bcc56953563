"""Two-stage score-distillation engine for hash-grid radiance fields.

Optimizes a neural field against denoising guidance oracles: a geometry stage
anchored by a reference view, then a texture stage with oracle adaptation.
"""

from .diffusion import (
    Conditioning,
    GuidanceOracle,
    NoiseSchedule,
    TargetImageOracle,
    adapt_oracle,
    build_schedule,
    forward_diffuse,
    sample_timestep,
    sds_grad,
    sds_loss_through,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DistillFieldError,
    NumericalFailure,
    OracleConnectivityError,
    OracleError,
)
from .field import HashGridConfig, RadianceField, encode_position, hash_corners
from .io import load_checkpoint, read_depth_raster, save_checkpoint, write_depth_raster
from .losses import (
    LossWeights,
    ReferenceBundle,
    depth_pearson_loss,
    label_components,
    normal_smoothness_loss,
    opacity_regularization,
    reconstruction_loss,
)
from .pipeline import (
    CameraPolicy,
    RunMetrics,
    StagePlan,
    extract_mesh,
    run_pipeline,
    sample_camera,
    stage1_step,
    stage2_step,
)
from .render import Camera, RenderOutput, composite_rays, estimate_normals, generate_rays, render_view
from .scenes import SceneSpec, make_reference_bundle, scene_field

__all__ = [
    "Camera",
    "CameraPolicy",
    "CheckpointError",
    "Conditioning",
    "ConfigError",
    "DistillFieldError",
    "GuidanceOracle",
    "HashGridConfig",
    "LossWeights",
    "NoiseSchedule",
    "NumericalFailure",
    "OracleConnectivityError",
    "OracleError",
    "RadianceField",
    "ReferenceBundle",
    "RenderOutput",
    "RunMetrics",
    "SceneSpec",
    "make_reference_bundle",
    "scene_field",
    "StagePlan",
    "TargetImageOracle",
    "adapt_oracle",
    "build_schedule",
    "composite_rays",
    "depth_pearson_loss",
    "encode_position",
    "estimate_normals",
    "extract_mesh",
    "forward_diffuse",
    "generate_rays",
    "hash_corners",
    "label_components",
    "load_checkpoint",
    "normal_smoothness_loss",
    "opacity_regularization",
    "read_depth_raster",
    "reconstruction_loss",
    "render_view",
    "run_pipeline",
    "sample_camera",
    "sample_timestep",
    "save_checkpoint",
    "sds_grad",
    "sds_loss_through",
    "stage1_step",
    "stage2_step",
    "write_depth_raster",
]

__version__ = "0.1.0"
