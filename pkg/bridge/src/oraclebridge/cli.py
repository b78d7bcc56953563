"""oraclebridge command line: mock (synthetic oracle) and real (model config)."""

from __future__ import annotations

import argparse

from distillfield.scenes import SCENE_KINDS, TEXTURES

from .service import mock_serve, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oraclebridge")
    sub = parser.add_subparsers(dest="command", required=True)

    mock = sub.add_parser("mock", help="serve the synthetic target-image oracle")
    mock.add_argument("--port", type=int, default=8151)
    mock.add_argument("--scene", default="textured-sphere",
                      choices=[k for k in SCENE_KINDS if k != "from-files"])
    mock.add_argument("--texture", default="rainbow", choices=list(TEXTURES))
    mock.add_argument("--radius", type=float, default=0.5)
    mock.add_argument("--density", type=float, default=80.0)
    mock.add_argument("--samples", type=int, default=64)
    mock.add_argument("--resolution", type=int, default=64)
    mock.add_argument("--rho", type=float, default=1.8)
    mock.add_argument("--theta-deg", type=float, default=90.0)
    mock.add_argument("--fov-deg", type=float, default=45.0)
    mock.add_argument("--margin", type=float, default=0.8)
    mock.add_argument("--steps", type=int, default=1000)
    mock.add_argument("--profile", default="linear-beta", choices=("linear-beta", "cosine"))
    mock.add_argument("--adaptable", action="store_true")
    mock.add_argument("--seed", type=int, default=0)

    real = sub.add_parser("real", help="serve a model named by a JSON config")
    real.add_argument("--port", type=int, default=8151)
    real.add_argument("--model-config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mock":
            mock_serve(
                args.port,
                scene=args.scene,
                texture=args.texture,
                radius=args.radius,
                density=args.density,
                samples_per_ray=args.samples,
                width=args.resolution,
                height=args.resolution,
                rho=args.rho,
                theta_deg=args.theta_deg,
                fov_deg=args.fov_deg,
                margin=args.margin,
                num_steps=args.steps,
                profile=args.profile,
                adaptable=args.adaptable,
                seed=args.seed,
            )
        else:
            serve(args.port, args.model_config)
    except KeyboardInterrupt:
        return 0
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
