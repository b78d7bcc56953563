"""Command-line surface: generate (run the two-stage pipeline), render orbit
views from a checkpoint, extract a mesh, evaluate against synthetic ground
truth, and scaffold a starter configuration.

stdout carries machine-readable JSON only; diagnostics go to stderr. Exit
codes: 0 success, 1 configuration/input error, 2 oracle connectivity failure,
3 numerical failure (aborts leave the rolling last-good checkpoint in place).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .config import load_config, scaffold_config
from .errors import (
    CheckpointError,
    ConfigError,
    DistillFieldError,
    NumericalFailure,
    OracleConnectivityError,
)
from .io import (
    load_checkpoint,
    normal_visualization,
    save_obj,
    write_depth_raster,
    write_png,
)
from .pipeline import evaluate_field, evaluation_ring, extract_mesh, render_orbit, run_pipeline
from .render import Camera
from .scenes import SCENE_KINDS

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONNECTIVITY = 2
EXIT_NUMERICAL = 3


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def cmd_generate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = args.out
    final_path, metrics = run_pipeline(config)
    stage_seconds = {
        str(r["stage"]): r["seconds"] for r in metrics.records if r["kind"] == "stage_time"
    }
    _emit(
        {
            "checkpoint": str(final_path),
            "stage1_checkpoint": str(Path(config.output_dir) / "stage1.dnf1"),
            "metrics": str(Path(config.output_dir) / "metrics.jsonl"),
            "iterations": config.stage1.iterations + config.stage2.iterations,
            "stage_seconds": stage_seconds,
        }
    )
    return EXIT_OK


def _orbit_camera_defaults(args) -> tuple[float, float, float, float]:
    """(rho, theta, fov_y, margin) for checkpoint-only rendering."""
    if args.config:
        config = load_config(args.config)
        ref = config.stage2.camera_policy.reference_camera
        margin = ref.far - ref.rho
        return ref.rho, ref.theta, ref.fov_y, margin
    return 1.8, math.radians(90.0), math.radians(45.0), 0.8


def cmd_render(args) -> int:
    field, _ = load_checkpoint(args.checkpoint)
    rho, theta, fov_y, margin = _orbit_camera_defaults(args)
    reference = Camera(
        rho=rho, theta=theta, phi=0.0, fov_y=fov_y,
        width=args.resolution, height=args.resolution,
        near=max(rho - margin, 0.05), far=rho + margin,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = render_orbit(field, reference, args.views, args.samples, args.resolution)
    files = []
    for k, out in enumerate(outputs):
        write_png(out_dir / f"color_{k:02d}.png", out.color)
        write_png(out_dir / f"mask_{k:02d}.png", (out.opacity > 0.5).float())
        write_png(out_dir / f"normal_{k:02d}.png", normal_visualization(out.normals))
        write_depth_raster(out_dir / f"depth_{k:02d}.dnfd", out.depth)
        files.append(str(out_dir / f"color_{k:02d}.png"))
    _emit({"views": args.views, "out": str(out_dir), "color_files": files})
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    if not config.scene.has_ground_truth:
        raise ConfigError("[inputs] scene: evaluation needs an analytic scene with ground truth")
    field, _ = load_checkpoint(args.checkpoint)
    ref = config.stage2.camera_policy.reference_camera
    ring = evaluation_ring(ref, args.views, args.resolution or ref.width)
    result = evaluate_field(
        field, config.scene, ring,
        samples_per_ray=args.samples,
        target_samples_per_ray=config.target_samples_per_ray,
        mesh_resolution=args.mesh_resolution,
    )
    _emit(result)
    return EXIT_OK


def cmd_mesh(args) -> int:
    field, _ = load_checkpoint(args.checkpoint)
    vertices, faces = extract_mesh(field, args.resolution, args.iso_level)
    save_obj(args.out, vertices, faces)
    _emit({"out": str(args.out), "vertices": int(len(vertices)), "faces": int(len(faces))})
    return EXIT_OK


def cmd_scaffold(args) -> int:
    scaffold_config(args.out, scene=args.scene, out_dir=args.run_dir)
    _emit({"config": str(args.out)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillfield",
        description="Two-stage score-distillation engine for hash-grid radiance fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run the two-stage pipeline from a config")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int, default=None, help="override the config seed")
    gen.add_argument("--out", default=None, help="override the config output directory")
    gen.set_defaults(func=cmd_generate)

    ren = sub.add_parser("render", help="render an azimuth orbit from a checkpoint")
    ren.add_argument("--checkpoint", required=True)
    ren.add_argument("--views", type=int, default=8)
    ren.add_argument("--resolution", type=int, default=64)
    ren.add_argument("--samples", type=int, default=128)
    ren.add_argument("--out", required=True)
    ren.add_argument("--config", default=None, help="borrow the orbit camera from a config")
    ren.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="compare a checkpoint against analytic ground truth")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--views", type=int, default=12)
    ev.add_argument("--resolution", type=int, default=None)
    ev.add_argument("--samples", type=int, default=128)
    ev.add_argument("--mesh-resolution", type=int, default=64)
    ev.set_defaults(func=cmd_eval)

    mesh = sub.add_parser("mesh", help="extract a marching-cubes OBJ from a checkpoint")
    mesh.add_argument("--checkpoint", required=True)
    mesh.add_argument("--resolution", type=int, default=96)
    mesh.add_argument("--iso-level", type=float, default=None)
    mesh.add_argument("--out", required=True)
    mesh.set_defaults(func=cmd_mesh)

    sc = sub.add_parser("scaffold", help="write a commented starter config")
    sc.add_argument("--out", required=True)
    sc.add_argument("--scene", default="textured-sphere", choices=[k for k in SCENE_KINDS if k != "from-files"])
    sc.add_argument("--run-dir", default="out")
    sc.set_defaults(func=cmd_scaffold)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _info(f"configuration error: {e}")
        return EXIT_CONFIG
    except CheckpointError as e:
        _info(f"checkpoint error: {e}")
        return EXIT_CONFIG
    except OracleConnectivityError as e:
        _info(f"oracle connectivity error: {e}")
        return EXIT_CONNECTIVITY
    except NumericalFailure as e:
        _info(f"numerical failure: {e}")
        _info("the rolling last_good.dnf1 checkpoint in the output directory is intact")
        return EXIT_NUMERICAL
    except DistillFieldError as e:
        _info(f"error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
