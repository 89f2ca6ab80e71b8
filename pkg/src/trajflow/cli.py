"""Command-line entry point: ``trajflow <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .config import ConfigError, load_config
from .core import DatasetError, ValidationError
from .flow import DivergenceError, MissingStatsError
from .metrics import MetricError, NumericalError
from .sim import PlacementError
from .train import NumericFailure

EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 2, 3, 4


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _globals(p: argparse.ArgumentParser, top: bool) -> None:
    # options may appear before or after the subcommand; only the top level sets defaults
    def dflt(v):
        return {"default": v if top else argparse.SUPPRESS}

    p.add_argument("--config", type=Path, help="run configuration JSON", **dflt(None))
    p.add_argument("--seed", type=int, help="master seed (u64)", **dflt(None))
    p.add_argument("--out", type=Path, help="output directory", **dflt(None))
    p.add_argument("--workers", type=_positive_int, help="parallel workers", **dflt(1))
    p.add_argument("--deterministic", action="store_true", help="float64, deterministic kernels", **dflt(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajflow", description=__doc__.splitlines()[0])
    _globals(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--K", type=int)

    p = sub.add_parser("train-vae", help="train the trajectory VAE")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train-denoiser", help="train the flow denoiser")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path)
    p.add_argument("--raw", action="store_true", help="raw-coordinate ablation (no VAE)")

    p = sub.add_parser("sample", help="sample futures for one scene")
    p.add_argument("--denoiser", type=Path, required=True)
    p.add_argument("--vae", type=Path)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--K", type=_positive_int, default=8)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-overlays", action="store_true")

    p = sub.add_parser("evaluate", help="score sampled futures against simulated ones")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--denoiser", type=Path)
    p.add_argument("--vae", type=Path)
    p.add_argument("--K", type=_positive_int)
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--gt-bypass", action="store_true", help="score ground truth against itself")

    p = sub.add_parser("metric-sanity", help="ground truth vs ground truth metric check")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("ablate-raw", help="latent vs raw-coordinate denoiser under one budget")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path)

    p = sub.add_parser("interp", help="decode latent interpolations between two futures")
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--i", type=int, default=0)
    p.add_argument("--j", type=int, default=1)
    p.add_argument("--n-steps", type=int, default=5)

    for action in sub.choices.values():
        _globals(action, top=False)
    return parser


def run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    out = Path(cfg.out)
    dtype = torch.float32
    prev = torch.get_default_dtype(), torch.are_deterministic_algorithms_enabled()
    if args.deterministic:
        torch.set_default_dtype(torch.float64)
        torch.use_deterministic_algorithms(True)
        dtype = torch.float64
    try:
        _dispatch(args, cfg, out, dtype)
    finally:
        torch.set_default_dtype(prev[0])
        torch.use_deterministic_algorithms(prev[1])
    return 0


def _dispatch(args, cfg, out, dtype) -> None:
    cmd = args.command
    if cmd == "generate":
        if args.n_scenes is not None:
            cfg.sim.n_scenes = args.n_scenes
        if args.K is not None:
            cfg.sim.K = args.K
        harness.cmd_generate(cfg, out, workers=args.workers)
    elif cmd == "train-vae":
        harness.cmd_train_vae(cfg, args.data, out, dtype=dtype)
    elif cmd == "train-denoiser":
        harness.cmd_train_denoiser(cfg, args.data, args.vae, out, raw=args.raw, dtype=dtype)
    elif cmd == "sample":
        harness.cmd_sample(args.denoiser, args.vae, args.scene, args.K, args.steps, cfg.seed, out,
                           overlays=not args.no_overlays)
    elif cmd == "evaluate":
        if args.n_scenes is not None:
            cfg.eval.n_scenes = args.n_scenes
        if not args.gt_bypass and args.denoiser is None:
            raise ValidationError("evaluate needs --denoiser unless --gt-bypass is given")
        harness.cmd_evaluate(cfg, args.data, out, args.denoiser, args.vae, args.K, gt_bypass=args.gt_bypass)
    elif cmd == "metric-sanity":
        harness.cmd_metric_sanity(cfg, args.data, out)
    elif cmd == "ablate-raw":
        harness.cmd_ablate_raw(cfg, args.data, out, args.vae, dtype=dtype)
    elif cmd == "interp":
        harness.cmd_interp(args.vae, args.scene, args.i, args.j, args.n_steps, out)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ValidationError, ConfigError, DatasetError, MetricError, MissingStatsError, PlacementError,
            FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericFailure, DivergenceError, NumericalError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
